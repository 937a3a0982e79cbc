"""Lagrangian-dual training of OPF predictors.

Three predictors share one training loop:

* the direct model, loads -> (v, dtheta, p_g, q_g) for the whole network;
* the coupling model (stage 1), loads -> voltages at coupling buses and
  angle differences on coupling lines;
* one regional model per region (stage 2), (regional loads, stage-1
  coupling voltages, stage-1 flows leaving the region) -> the region's
  remaining voltages, internal angle differences and generator setpoints.

Each predicted family has its own one-hidden-layer subnetwork. The loss is
``L0 + sum_c lambda_c * mean_batch(nu_c)`` with one multiplier per
constraint instance, and ``lambda += rho * nu_bar`` after every block of
``epochs_w`` passes over the data.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .acopf import KINDS, LoadProfile, OpfSolution, arc_flow, arc_flow_partials, arc_flows, bound_violation
from .datagen import Dataset, DatasetError
from .netmodel import NetworkCase
from .neural import MlpModel, NeuralError, OptimState, backward, forward, init_model, load_models, lr_at, \
    save_models, step
from .partition import Partition

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "DualWeights", "ConstraintSet", "TrainingAbort", "SubnetModel", "DirectModel",
           "CouplingModel", "RegionalModel", "OpfPrediction", "Stage1Output", "loss_l0", "penalized_loss",
           "penalized_loss_grad", "network_loss_grad", "dual_update", "train_direct", "train_stage1",
           "train_stage2_region", "train_stage2", "stage1_flows", "regional_features", "assemble_prediction", "predict_direct",
           "save_model", "load_model", "write_log", "LOG_COLUMNS"]

FAMILIES = ("v", "dtheta", "p_g", "q_g")
LOG_COLUMNS = ("stage", "region", "lambda_epoch", "w_epoch", "lr", "train_loss", "holdout_L0") + \
    tuple(f"mean_violation_{k}" for k in KINDS)


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss; ``checkpoint`` holds the last good subnetworks."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs_lambda: int = 10
    epochs_w: int = 50
    batch_size: int = 120
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    rho: float = 1e-3
    seed: int = 0
    wall_clock_budget: float | None = None
    norm: str = "l1"
    holdout_fraction: float = 0.1
    hidden_multiplier: int = 3

    def __post_init__(self):
        if self.epochs_lambda < 1 or self.epochs_w < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.norm not in ("l1", "l2"):
            raise ValueError("norm must be 'l1' or 'l2'")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.wall_clock_budget is not None and self.wall_clock_budget <= 0:
            raise ValueError("wall_clock_budget must be positive")


# --------------------------------------------------------------------------- constraints


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Constraint instances entering a penalty.

    ``fixed_arcs`` leave balance buses but take externally supplied flows
    (stage-1 predictions) instead of flows derived from the predicted state.
    """

    v_buses: np.ndarray
    gens: np.ndarray
    thermal_arcs: np.ndarray
    balance_buses: np.ndarray
    fixed_arcs: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def sizes(self) -> dict[str, int]:
        return {"v_bound": len(self.v_buses), "p_bound": len(self.gens), "q_bound": len(self.gens),
                "thermal": len(self.thermal_arcs), "p_balance": len(self.balance_buses),
                "q_balance": len(self.balance_buses)}

    @staticmethod
    def _finite(case: NetworkCase, arcs):
        arcs = np.asarray(arcs, dtype=np.int64)
        return arcs[np.isfinite(case.arc_smax[arcs])]

    @classmethod
    def full(cls, case: NetworkCase) -> "ConstraintSet":
        return cls(np.arange(case.n_bus), np.arange(case.n_gen),
                   cls._finite(case, np.arange(2 * case.n_branch)), np.arange(case.n_bus))

    @classmethod
    def coupling(cls, case: NetworkCase, part: Partition) -> "ConstraintSet":
        """Voltage bounds on coupling buses and thermal limits on coupling arcs."""
        e = np.zeros(0, np.int64)
        return cls(part.coupling_buses, e, cls._finite(case, part.coupling_arcs(case.n_branch)), e)

    @classmethod
    def region(cls, case: NetworkCase, part: Partition, k: int) -> "ConstraintSet":
        nb = case.n_branch
        internal = part.internal_branches[k]
        return cls(v_buses=_noncoupling(part, k), gens=part.region_generators[k],
                   thermal_arcs=cls._finite(case, np.sort(np.concatenate([internal, internal + nb]))),
                   balance_buses=part.region_buses[k], fixed_arcs=part.region_coupling_arcs[k])


def _noncoupling(part: Partition, k: int) -> np.ndarray:
    return np.setdiff1d(part.region_buses[k], part.region_coupling_buses[k])


def _csr(rows, cols, vals, shape):
    return sp.csr_matrix((np.asarray(vals, float), (np.asarray(rows, np.int64), np.asarray(cols, np.int64))),
                         shape=shape)


class _Penalty:
    """Violations of a constraint set and the gradient of ``sum lambda * mean_batch(nu)``."""

    def __init__(self, case: NetworkCase, cset: ConstraintSet):
        self.case, self.cset = case, cset
        n, nb = case.n_bus, case.n_branch
        af = case.arc_from
        bal = np.asarray(cset.balance_buses, np.int64)
        fixed = np.asarray(cset.fixed_arcs, np.int64)
        is_bal = np.zeros(n, bool)
        is_bal[bal] = True
        if len(fixed) and not np.all(is_bal[af[fixed]]):
            raise ValueError("fixed arcs must leave balance buses")
        is_fixed = np.zeros(2 * nb, bool)
        is_fixed[fixed] = True
        bal_arcs = np.flatnonzero(is_bal[af] & ~is_fixed)
        self.arcs = np.union1d(np.asarray(cset.thermal_arcs, np.int64), bal_arcs)
        pos = np.full(2 * nb, -1)
        pos[self.arcs] = np.arange(len(self.arcs))
        self.th_pos = pos[np.asarray(cset.thermal_arcs, np.int64)]
        row = np.full(n, -1)
        row[bal] = np.arange(len(bal))
        ne, nbal = len(self.arcs), len(bal)
        self.S_arc = _csr(row[af[bal_arcs]], pos[bal_arcs], np.ones(len(bal_arcs)), (nbal, ne))
        g_in = np.flatnonzero(is_bal[case.gen_bus]) if case.n_gen else np.zeros(0, np.int64)
        self.S_gen = _csr(row[case.gen_bus[g_in]], g_in, np.ones(len(g_in)), (nbal, case.n_gen))
        self.S_fix = _csr(row[af[fixed]], np.arange(len(fixed)), np.ones(len(fixed)), (nbal, len(fixed)))
        self.fi, self.ti = case.arc_from[self.arcs], case.arc_to[self.arcs]
        self.br = self.arcs % nb if nb else self.arcs
        self.sg = np.where(self.arcs < nb, 1.0, -1.0)
        self.coef = case.arc_coef[self.arcs].T
        e = np.arange(ne)
        self.Mf = _csr(e, self.fi, np.ones(ne), (ne, n))
        self.Mt = _csr(e, self.ti, np.ones(ne), (ne, n))
        self.Mb = _csr(e, self.br, self.sg, (ne, nb))
        self.bal = bal
        self.smax = case.arc_smax[np.asarray(cset.thermal_arcs, np.int64)]

    @staticmethod
    def _apply(M, X):
        """Row-wise ``M @ x`` for every row x of X."""
        return np.asarray((M @ X.T).T)

    def evaluate(self, v, dth, pg, qg, pd, qd, fp=None, fq=None, lam=None):
        case, cs = self.case, self.cset
        B = v.shape[0]
        vi, vj = v[:, self.fi], v[:, self.ti]
        d = dth[:, self.br] * self.sg
        p, q = arc_flow(vi, vj, d, *self.coef)
        nu = {
            "v_bound": bound_violation(v[:, cs.v_buses], case.v_min[cs.v_buses], case.v_max[cs.v_buses]),
            "p_bound": bound_violation(pg[:, cs.gens], case.p_min[cs.gens], case.p_max[cs.gens]),
            "q_bound": bound_violation(qg[:, cs.gens], case.q_min[cs.gens], case.q_max[cs.gens]),
        }
        pt, qt = p[:, self.th_pos], q[:, self.th_pos]
        s = np.hypot(pt, qt)
        nu["thermal"] = np.maximum(0.0, s - self.smax)
        bal = self.bal
        v2 = v[:, bal] ** 2
        dp = self._apply(self.S_gen, pg) - pd[:, bal] - case.g_sh[bal] * v2 - self._apply(self.S_arc, p)
        dq = self._apply(self.S_gen, qg) - qd[:, bal] + case.b_sh[bal] * v2 - self._apply(self.S_arc, q)
        if fp is not None and fp.shape[1]:
            dp = dp - self._apply(self.S_fix, fp)
            dq = dq - self._apply(self.S_fix, fq)
        nu["p_balance"], nu["q_balance"] = np.abs(dp), np.abs(dq)
        if lam is None:
            return nu, None

        gv, gd = np.zeros_like(v), np.zeros_like(dth)
        gpg, gqg = np.zeros_like(pg), np.zeros_like(qg)

        def bound_grad(x, lo, hi):
            return (x > hi).astype(float) - (x < lo).astype(float)

        gv[:, cs.v_buses] += lam["v_bound"] * bound_grad(v[:, cs.v_buses], case.v_min[cs.v_buses],
                                                         case.v_max[cs.v_buses])
        gpg[:, cs.gens] += lam["p_bound"] * bound_grad(pg[:, cs.gens], case.p_min[cs.gens], case.p_max[cs.gens])
        gqg[:, cs.gens] += lam["q_bound"] * bound_grad(qg[:, cs.gens], case.q_min[cs.gens], case.q_max[cs.gens])
        wp, wq = np.zeros_like(p), np.zeros_like(q)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(s > self.smax, lam["thermal"] / s, 0.0)
        wp[:, self.th_pos] += r * pt
        wq[:, self.th_pos] += r * qt
        sp_, sq_ = np.sign(dp) * lam["p_balance"], np.sign(dq) * lam["q_balance"]
        wp -= self._apply(self.S_arc.T, sp_)
        wq -= self._apply(self.S_arc.T, sq_)
        gpg += self._apply(self.S_gen.T, sp_)
        gqg += self._apply(self.S_gen.T, sq_)
        gv[:, bal] += 2 * v[:, bal] * (case.b_sh[bal] * sq_ - case.g_sh[bal] * sp_)
        dpp, dqp = arc_flow_partials(vi, vj, d, *self.coef)
        gv += self._apply(self.Mf.T, wp * dpp[0] + wq * dqp[0]) + self._apply(self.Mt.T, wp * dpp[1] + wq * dqp[1])
        gd += self._apply(self.Mb.T, wp * dpp[2] + wq * dqp[2])
        grads = {"v": gv / B, "dtheta": gd / B, "p_g": gpg / B, "q_g": gqg / B}
        return nu, grads


# --------------------------------------------------------------------------- losses and duals


@dataclass(frozen=True)
class DualWeights:
    lam: dict
    rho: float = 1e-3

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        for k, a in self.lam.items():
            if np.any(np.asarray(a) < 0):
                raise ValueError(f"negative multiplier for {k}")

    @classmethod
    def zeros(cls, cset: ConstraintSet, rho: float = 1e-3) -> "DualWeights":
        return cls({k: np.zeros(n) for k, n in cset.sizes().items()}, rho)

    def penalty(self, nu: dict) -> float:
        return float(sum(np.sum(self.lam[k] * np.mean(nu[k], axis=0)) for k in KINDS
                         if k in nu and np.size(nu[k])))


def dual_update(duals: DualWeights, nu_bar: dict) -> DualWeights:
    """lambda_c += rho * nu_bar_c for every constraint instance."""
    new = {}
    for k, lam in duals.lam.items():
        nb = np.asarray(nu_bar.get(k, np.zeros_like(lam)), dtype=float)
        if nb.shape != lam.shape:
            raise ValueError(f"nu_bar[{k}] has shape {nb.shape}, multipliers {lam.shape}")
        if np.any(nb < 0) or not np.all(np.isfinite(nb)):
            raise ValueError(f"nu_bar[{k}] must be finite and nonnegative")
        new[k] = lam + duals.rho * nb
    return DualWeights(new, duals.rho)


def _l0_terms(pred, truth, norm):
    diff = pred - truth
    if norm == "l1":
        return np.abs(diff).sum(axis=-1), np.sign(diff)
    return (diff * diff).sum(axis=-1), 2 * diff


def loss_l0(pred, truth, norm: str = "l1") -> float:
    """Mean over samples of the summed per-variable error (absolute or squared).

    ``pred`` and ``truth`` are arrays of shape (batch, n) or dicts of them
    with identical keys.
    """
    if isinstance(pred, dict) or isinstance(truth, dict):
        if not (isinstance(pred, dict) and isinstance(truth, dict)) or set(pred) != set(truth):
            raise ValueError("pred and truth cover different variable families")
        return float(sum(loss_l0(pred[k], truth[k], norm) for k in pred))
    pred, truth = np.atleast_2d(pred), np.atleast_2d(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(_l0_terms(pred, truth, norm)[0]))


def _family_arrays(sol: OpfSolution):
    return {"v": np.atleast_2d(sol.v), "dtheta": np.atleast_2d(sol.dtheta),
            "p_g": np.atleast_2d(sol.p_g), "q_g": np.atleast_2d(sol.q_g)}


def penalized_loss_grad(pred: OpfSolution, truth: OpfSolution, case: NetworkCase, loads: LoadProfile,
                        duals: DualWeights, cset: ConstraintSet, coupling=None, outputs: dict | None = None,
                        norm: str = "l1"):
    """Loss ``L0 + lambda . nu_bar`` and its gradient w.r.t. the full-size
    prediction arrays (v, dtheta, p_g, q_g).

    ``outputs`` maps family -> indices entering L0 (default: everything).
    ``coupling`` supplies flows on ``cset.fixed_arcs`` as a CouplingFlows.
    """
    P, Y = _family_arrays(pred), _family_arrays(truth)
    B = P["v"].shape[0]
    if outputs is None:
        outputs = {f: np.arange(P[f].shape[1]) for f in FAMILIES}
    pen = _Penalty(case, cset)
    fp = fq = None
    if coupling is not None:
        if not np.array_equal(coupling.arcs, cset.fixed_arcs):
            raise ValueError("coupling flows do not match the constraint set's fixed arcs")
        fp, fq = np.atleast_2d(coupling.p_f), np.atleast_2d(coupling.q_f)
    elif len(cset.fixed_arcs):
        raise ValueError("constraint set has fixed arcs but no coupling flows were given")
    nu, grads = pen.evaluate(P["v"], P["dtheta"], P["p_g"], P["q_g"], np.atleast_2d(loads.p_d),
                             np.atleast_2d(loads.q_d), fp, fq, lam=duals.lam)
    loss = duals.penalty(nu)
    for f, idx in outputs.items():
        if len(idx) == 0:
            continue
        terms, d = _l0_terms(P[f][:, idx], Y[f][:, idx], norm)
        loss += float(np.mean(terms))
        grads[f][:, idx] += d / B
    return loss, grads


def penalized_loss(pred, truth, case, loads, duals, cset, coupling=None, outputs=None, norm="l1") -> float:
    return penalized_loss_grad(pred, truth, case, loads, duals, cset, coupling, outputs, norm)[0]


# --------------------------------------------------------------------------- models


@dataclass
class SubnetModel:
    """One subnetwork per predicted family; ``targets[f]`` are case indices."""

    kind: str
    heads: dict
    targets: dict
    case_hash: str
    partition_hash: str | None = None
    region: int | None = None
    # multipliers after each dual update (in memory only, not saved)
    dual_trace: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_in(self) -> int:
        return next(iter(self.heads.values())).dims[0]

    def predict(self, X: np.ndarray) -> dict[str, np.ndarray]:
        X = np.atleast_2d(X)
        return {f: m.predict(X) for f, m in self.heads.items()}


class DirectModel(SubnetModel):
    pass


class CouplingModel(SubnetModel):
    pass


class RegionalModel(SubnetModel):
    pass


_KIND_CLASS = {"direct": DirectModel, "coupling": CouplingModel, "regional": RegionalModel}


def save_model(model: SubnetModel, path, extra: dict | None = None) -> Path:
    meta = {"kind": model.kind, "region": model.region, "case_hash": model.case_hash,
            "partition_hash": model.partition_hash,
            "targets": {f: np.asarray(t).tolist() for f, t in model.targets.items()}}
    if extra:
        meta["extra"] = extra
    return save_models(path, model.heads, meta)


def load_model(path) -> SubnetModel:
    heads, meta = load_models(path)
    cls = _KIND_CLASS.get(meta.get("kind"))
    if cls is None:
        raise NeuralError(f"unknown model kind {meta.get('kind')!r}")
    return cls(kind=meta["kind"], heads=heads,
               targets={f: np.array(t, dtype=np.int64) for f, t in meta["targets"].items()},
               case_hash=meta["case_hash"], partition_hash=meta["partition_hash"], region=meta["region"])


# --------------------------------------------------------------------------- the training loop


def _network_loss(heads, targets, X, truth, base, pen, duals, p_d, q_d, fixed_p, fixed_q, norm):
    """Penalised loss of one mini-batch and its gradient w.r.t. every head's parameters."""
    out, caches = {}, {}
    for f, m in heads.items():
        z, caches[f] = forward(m, (X - m.x_mean) / m.x_std)
        out[f] = m.y_mean + m.y_std * z
    full = {}
    for f in FAMILIES:
        a = np.array(base[f], copy=True)
        if f in out:
            a[:, targets[f]] = out[f]
        full[f] = a
    nu, g_full = pen.evaluate(full["v"], full["dtheta"], full["p_g"], full["q_g"], p_d, q_d, fixed_p, fixed_q,
                              lam=duals.lam)
    loss = duals.penalty(nu)
    B = X.shape[0]
    grads = {}
    for f, m in heads.items():
        terms, d = _l0_terms(out[f], truth[f], norm)
        loss += float(np.mean(terms))
        d_out = (g_full[f][:, targets[f]] + d / B) * m.y_std
        grads[f], _ = backward(m, caches[f], d_out)
    return loss, grads


def network_loss_grad(model: "SubnetModel", X, truth: dict, case: NetworkCase, loads: LoadProfile,
                      duals: DualWeights, cset: ConstraintSet, coupling=None, base: dict | None = None,
                      norm: str = "l1"):
    """Penalised loss of a model on a batch and its parameter gradients.

    ``truth`` holds the targets of every head, ``base`` the full-size values
    of entries the model does not predict (defaults: v = 1, others 0).
    """
    X = np.atleast_2d(X)
    B = X.shape[0]
    if base is None:
        base = _ones_base(B, case)
    fp = fq = np.zeros((B, 0))
    if coupling is not None:
        fp, fq = np.atleast_2d(coupling.p_f), np.atleast_2d(coupling.q_f)
    return _network_loss(model.heads, model.targets, X, truth, base, _Penalty(case, cset), duals,
                         np.atleast_2d(loads.p_d), np.atleast_2d(loads.q_d), fp, fq, norm)



@dataclass
class _Task:
    stage: str
    region: int
    X: np.ndarray                    # (T, n_in) inputs for every dataset sample
    targets: dict                    # family -> case indices predicted
    hidden: dict                     # family -> hidden width
    truth: dict                      # family -> (T, n_targets)
    base: dict                       # family -> (T, full size) values of non-predicted entries
    p_d: np.ndarray
    q_d: np.ndarray
    fixed_p: np.ndarray
    fixed_q: np.ndarray
    cset: ConstraintSet


def _seed_for(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


_STAGE_CODE = {"direct": 0, "stage1": 1, "stage2": 2}


def _split_holdout(train_idx, frac, rng):
    perm = rng.permutation(np.asarray(train_idx))
    n_hold = int(round(frac * len(perm)))
    if len(perm) - n_hold < 1:
        n_hold = 0
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


class _Trainer:
    def __init__(self, case: NetworkCase, task: _Task, config: TrainConfig, train_idx):
        self.case, self.task, self.cfg = case, task, config
        code = _STAGE_CODE[task.stage]
        self.rng = np.random.default_rng([config.seed, code, task.region + 1])
        self.fit, self.hold = _split_holdout(train_idx, config.holdout_fraction, self.rng)
        self.models: dict[str, MlpModel] = {}
        Xf = task.X[self.fit]
        for i, f in enumerate(FAMILIES):
            if f not in task.targets or len(task.targets[f]) == 0:
                continue
            m = init_model((task.X.shape[1], task.hidden[f], len(task.targets[f])),
                           _seed_for(config.seed, code, task.region + 1, i))
            m.set_normalization(Xf, task.truth[f][self.fit])
            self.models[f] = m
        self.opt = {f: OptimState(lr=config.lr_start) for f in self.models}
        self.pen = _Penalty(case, task.cset)
        self.duals = DualWeights.zeros(task.cset, config.rho)
        self.dual_trace = [self.duals]
        self.rows: list[dict] = []

    def _predict(self, idx):
        return {f: m.predict(self.task.X[idx]) for f, m in self.models.items()}

    def _full(self, idx, out):
        full = {}
        for f in FAMILIES:
            a = np.array(self.task.base[f][idx], copy=True)
            if f in out:
                a[:, self.task.targets[f]] = out[f]
            full[f] = a
        return full

    def _evaluate(self, idx, out, lam=None):
        t = self.task
        full = self._full(idx, out)
        return self.pen.evaluate(full["v"], full["dtheta"], full["p_g"], full["q_g"], t.p_d[idx], t.q_d[idx],
                                 t.fixed_p[idx], t.fixed_q[idx], lam=lam)

    def _batch(self, idx) -> float:
        t = self.task
        loss, grads = _network_loss(self.models, t.targets, t.X[idx], {f: t.truth[f][idx] for f in self.models},
                                    {f: t.base[f][idx] for f in FAMILIES}, self.pen, self.duals,
                                    t.p_d[idx], t.q_d[idx], t.fixed_p[idx], t.fixed_q[idx], self.cfg.norm)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for gs in grads.values() for g in gs.values()):
            return float("nan")
        for f, m in self.models.items():
            step(m, grads[f], self.opt[f])
        return loss

    def _mean_violation(self, idx, chunk=1000):
        sums = {k: np.zeros(n) for k, n in self.task.cset.sizes().items()}
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            nu, _ = self._evaluate(part, self._predict(part))
            for k in sums:
                sums[k] += nu[k].sum(axis=0)
        return {k: v / max(len(idx), 1) for k, v in sums.items()}

    def _holdout_l0(self):
        if len(self.hold) == 0:
            return float("nan")
        out = self._predict(self.hold)
        return float(sum(np.mean(_l0_terms(out[f], self.task.truth[f][self.hold], self.cfg.norm)[0])
                         for f in self.models))

    def _log(self, i, j, lr, train_loss, holdout, viol):
        row = {"stage": self.task.stage, "region": self.task.region, "lambda_epoch": i, "w_epoch": j,
               "lr": lr, "train_loss": train_loss, "holdout_L0": holdout}
        for k in KINDS:
            a = viol.get(k)
            row[f"mean_violation_{k}"] = float(np.mean(a)) if a is not None and np.size(a) else ""
        self.rows.append(row)

    def _snapshot(self):
        return {f: m.copy() for f, m in self.models.items()}

    def run(self) -> dict[str, MlpModel]:
        cfg = self.cfg
        budget = cfg.wall_clock_budget
        t0 = time.perf_counter()
        best, best_score = None, np.inf
        last_good = self._snapshot()
        bs = cfg.batch_size
        for i in range(cfg.epochs_lambda):
            lr = lr_at(i, cfg.epochs_lambda, cfg.lr_start, cfg.lr_end)
            for s in self.opt.values():
                s.lr = lr
            slice_end = t0 + budget * (i + 1) / cfg.epochs_lambda if budget else None
            j = 0
            while True:
                order = self.rng.permutation(self.fit)
                losses = []
                for s in range(0, len(order), bs):
                    loss = self._batch(order[s:s + bs])
                    if not np.isfinite(loss):
                        raise TrainingAbort(f"non-finite loss in {self.task.stage} region {self.task.region} "
                                            f"at lambda-epoch {i}, w-epoch {j}", checkpoint=last_good)
                    losses.append(loss)
                last_good = self._snapshot()
                hold_l0 = self._holdout_l0()
                viol = self._mean_violation(self.hold) if len(self.hold) else {}
                self._log(i, j, lr, float(np.mean(losses)), hold_l0, viol)
                if budget and np.isfinite(hold_l0) and hold_l0 < best_score:
                    best, best_score = self._snapshot(), hold_l0
                j += 1
                if budget is None:
                    if j >= cfg.epochs_w:
                        break
                elif time.perf_counter() >= slice_end:
                    break
            self.duals = dual_update(self.duals, self._mean_violation(self.fit))
            self.dual_trace.append(self.duals)
            if budget and time.perf_counter() - t0 >= budget:
                break
        if best is not None:
            self.models = best
        return self.models


def _check_dataset(ds: Dataset, case_hash: str, part: Partition | None = None):
    if ds.case_hash != case_hash:
        raise DatasetError(f"dataset built for case {ds.case_hash}, model expects {case_hash}")
    if part is not None and part.case_hash != ds.case_hash:
        raise DatasetError("partition and dataset refer to different cases")


def _ones_base(T, case):
    return {"v": np.ones((T, case.n_bus)), "dtheta": np.zeros((T, case.n_branch)),
            "p_g": np.zeros((T, case.n_gen)), "q_g": np.zeros((T, case.n_gen))}


def _truth(ds: Dataset, targets):
    src = {"v": ds.v, "dtheta": ds.dtheta, "p_g": ds.p_g, "q_g": ds.q_g}
    return {f: src[f][:, idx] for f, idx in targets.items()}


def _direct_task(ds: Dataset, cfg: TrainConfig) -> _Task:
    case = ds.case
    m = cfg.hidden_multiplier * max(case.n_load, 1)
    targets = {"v": np.arange(case.n_bus), "dtheta": np.arange(case.n_branch),
               "p_g": np.arange(case.n_gen), "q_g": np.arange(case.n_gen)}
    targets = {f: t for f, t in targets.items() if len(t)}
    T = ds.T
    return _Task("direct", -1, ds.load_features(), targets, {f: m for f in targets}, _truth(ds, targets),
                 _ones_base(T, case), ds.p_d, ds.q_d, np.zeros((T, 0)), np.zeros((T, 0)),
                 ConstraintSet.full(case))


def train_direct(ds: Dataset, config: TrainConfig | None = None):
    """Monolithic loads -> full OPF solution model with the full constraint set."""
    cfg = config or TrainConfig()
    task = _direct_task(ds, cfg)
    tr = _Trainer(ds.case, task, cfg, ds.train)
    heads = tr.run()
    model = DirectModel("direct", heads, {f: task.targets[f] for f in heads}, ds.case.content_hash,
                        dual_trace=tr.dual_trace)
    return model, tr.rows


def train_stage1(ds: Dataset, part: Partition, config: TrainConfig | None = None):
    """Coupling-bus voltages and coupling-line angle differences from all loads."""
    cfg = config or TrainConfig()
    case = ds.case
    _check_dataset(ds, part.case_hash, part)
    if part.K == 1 or len(part.coupling_branches) == 0:
        raise ValueError("stage 1 is undefined without coupling lines (K=1)")
    targets = {"v": part.coupling_buses, "dtheta": part.coupling_branches}
    hidden = {"v": len(part.coupling_buses), "dtheta": len(part.coupling_branches)}
    T = ds.T
    task = _Task("stage1", -1, ds.load_features(), targets, hidden, _truth(ds, targets), _ones_base(T, case),
                 ds.p_d, ds.q_d, np.zeros((T, 0)), np.zeros((T, 0)), ConstraintSet.coupling(case, part))
    tr = _Trainer(case, task, cfg, ds.train)
    heads = tr.run()
    model = CouplingModel("coupling", heads, targets, case.content_hash, part.assignment.digest,
                          dual_trace=tr.dual_trace)
    return model, tr.rows


@dataclass(frozen=True)
class Stage1Output:
    v: np.ndarray        # (B, |N<->|)
    dtheta: np.ndarray   # (B, |E<->|)
    arcs: np.ndarray     # both orientations of every coupling line
    p_f: np.ndarray      # (B, 2|E<->|)
    q_f: np.ndarray


def _load_features(case: NetworkCase, loads: LoadProfile):
    lb = case.load_bus
    return np.concatenate([np.atleast_2d(loads.p_d)[:, lb], np.atleast_2d(loads.q_d)[:, lb]], axis=1)


def stage1_flows(coupling_model: CouplingModel, loads: LoadProfile, case: NetworkCase,
                 part: Partition) -> Stage1Output:
    """Stage-1 coupling predictions and the arc flows they imply."""
    pred = coupling_model.predict(_load_features(case, loads))
    return coupling_flows_from(pred["v"], pred["dtheta"], case, part)


def coupling_flows_from(v0, dth0, case: NetworkCase, part: Partition) -> Stage1Output:
    v0, dth0 = np.atleast_2d(v0), np.atleast_2d(dth0)
    B = v0.shape[0]
    v = np.ones((B, case.n_bus))
    v[:, part.coupling_buses] = v0
    cb = part.coupling_branches
    arcs = part.coupling_arcs(case.n_branch)
    coef = case.arc_coef[arcs].T
    d = np.concatenate([dth0, -dth0], axis=1)
    p, q = arc_flow(v[:, case.arc_from[arcs]], v[:, case.arc_to[arcs]], d, *coef)
    assert len(arcs) == 2 * len(cb)
    return Stage1Output(v0, dth0, arcs, p, q)


def regional_features(case: NetworkCase, part: Partition, k: int, loads: LoadProfile,
                      s1: Stage1Output | None):
    """Inputs of region k: its loads (p then q), stage-1 voltages at its coupling
    buses, stage-1 (p, q) flows on its coupling arcs leaving the region."""
    lb = case.load_bus[part.region_loads[k]]
    p_d, q_d = np.atleast_2d(loads.p_d), np.atleast_2d(loads.q_d)
    cols = [p_d[:, lb], q_d[:, lb]]
    fp = fq = np.zeros((p_d.shape[0], 0))
    if s1 is not None and part.K > 1:
        vpos = np.searchsorted(part.coupling_buses, part.region_coupling_buses[k])
        apos = _arc_positions(s1.arcs, part.region_coupling_arcs[k])
        fp, fq = s1.p_f[:, apos], s1.q_f[:, apos]
        cols += [s1.v[:, vpos], fp, fq]
    return np.concatenate(cols, axis=1), fp, fq


def _arc_positions(all_arcs, arcs):
    lookup = {int(a): i for i, a in enumerate(all_arcs)}
    return np.array([lookup[int(a)] for a in arcs], dtype=np.int64)


def _region_task(ds: Dataset, part: Partition, k: int, s1: Stage1Output | None, cfg: TrainConfig) -> _Task:
    case = ds.case
    X, fp, fq = regional_features(case, part, k, ds.loads(), s1)
    if X.shape[1] == 0:
        raise ValueError(f"region {k} has no inputs (no loads and no coupling)")
    targets = {"v": _noncoupling(part, k) if part.K > 1 else part.region_buses[k],
               "dtheta": part.internal_branches[k],
               "p_g": part.region_generators[k], "q_g": part.region_generators[k]}
    targets = {f: t for f, t in targets.items() if len(t)}
    h = cfg.hidden_multiplier * max(len(part.region_loads[k]), 1)
    base = _ones_base(ds.T, case)
    if s1 is not None and part.K > 1:
        base["v"][:, part.coupling_buses] = s1.v
    return _Task("stage2", k, X, targets, {f: h for f in targets}, _truth(ds, targets), base, ds.p_d, ds.q_d,
                 fp, fq, ConstraintSet.region(case, part, k))


def train_stage2_region(ds: Dataset, part: Partition, k: int, coupling_model: CouplingModel | None,
                        config: TrainConfig | None = None, s1: Stage1Output | None = None):
    """Regional model k on stage-1 predictions (never ground-truth coupling values)."""
    cfg = config or TrainConfig()
    _check_dataset(ds, part.case_hash, part)
    if not 0 <= k < part.K:
        raise ValueError(f"region {k} outside [0, {part.K})")
    if part.K > 1:
        if coupling_model is None and s1 is None:
            raise ValueError("stage 2 needs the trained stage-1 model")
        if s1 is None:
            s1 = stage1_flows(coupling_model, ds.loads(), ds.case, part)
    task = _region_task(ds, part, k, s1, cfg)
    tr = _Trainer(ds.case, task, cfg, ds.train)
    heads = tr.run()
    model = RegionalModel("regional", heads, {f: task.targets[f] for f in heads}, ds.case.content_hash,
                          part.assignment.digest, region=k, dual_trace=tr.dual_trace)
    return model, tr.rows


def _region_job(args):
    return train_stage2_region(*args)


def train_stage2(ds: Dataset, part: Partition, coupling_model: CouplingModel | None,
                 config: TrainConfig | None = None, workers: int = 1):
    """All regional models; regions are independent, so worker count does not change results."""
    cfg = config or TrainConfig()
    s1 = stage1_flows(coupling_model, ds.loads(), ds.case, part) if part.K > 1 else None
    jobs = [(ds, part, k, None, cfg, s1) for k in range(part.K)]
    if workers > 1 and part.K > 1:
        with ProcessPoolExecutor(max_workers=min(workers, part.K)) as pool:
            results = list(pool.map(_region_job, jobs))
    else:
        results = [_region_job(j) for j in jobs]
    models = [r[0] for r in results]
    rows = [row for r in results for row in r[1]]
    return models, rows


# --------------------------------------------------------------------------- prediction


@dataclass(frozen=True)
class OpfPrediction:
    """Predicted state with per-element provenance.

    ``source[f][i]`` is -1 for the stage-1 coupling model and the region
    index for regional (or, with code 0, direct) models.
    """

    v: np.ndarray
    dtheta: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray
    p_f: np.ndarray
    q_f: np.ndarray
    source: dict

    def solution(self) -> OpfSolution:
        return OpfSolution(v=self.v, dtheta=self.dtheta, p_g=self.p_g, q_g=self.q_g, p_f=self.p_f, q_f=self.q_f)


def _finish_prediction(case, v, dth, pg, qg, source):
    sizes = {"v": case.n_bus, "dtheta": case.n_branch, "p_g": case.n_gen, "q_g": case.n_gen}
    for f, (src, count) in source.items():
        if np.any(count != 1):
            bad = np.flatnonzero(count != 1)
            raise ValueError(f"{f}: elements {bad[:10].tolist()} have {count[bad[:10]].tolist()} sources")
        assert len(src) == sizes[f]
    p_f, q_f = arc_flows(case, v, dth)
    return OpfPrediction(v, dth, pg, qg, p_f, q_f, {f: s for f, (s, _) in source.items()})


def assemble_prediction(coupling_model: CouplingModel | None, regional_models, loads: LoadProfile,
                        case: NetworkCase, part: Partition) -> OpfPrediction:
    """Stitch stage-1 and per-region predictions into a full state."""
    by_region = {m.region: m for m in regional_models}
    missing = [k for k in range(part.K) if k not in by_region]
    if missing:
        raise ValueError(f"no regional model for region(s) {missing}")
    for m in list(by_region.values()) + ([coupling_model] if coupling_model else []):
        if m.case_hash != case.content_hash:
            raise ValueError(f"{m.kind} model was trained on case {m.case_hash}, not {case.content_hash}")
        if m.partition_hash != part.assignment.digest:
            raise ValueError(f"{m.kind} model was trained on a different partition")
    if part.K > 1 and coupling_model is None:
        raise ValueError("stage-1 model required when K > 1")
    B = np.atleast_2d(loads.p_d).shape[0]
    arrays = {"v": np.zeros((B, case.n_bus)), "dtheta": np.zeros((B, case.n_branch)),
              "p_g": np.zeros((B, case.n_gen)), "q_g": np.zeros((B, case.n_gen))}
    source = {f: (np.full(a.shape[1], -2), np.zeros(a.shape[1], np.int64)) for f, a in arrays.items()}

    def put(f, idx, values, code):
        arrays[f][:, idx] = values
        source[f][0][idx] = code
        source[f][1][idx] += 1

    s1 = None
    if part.K > 1:
        s1 = stage1_flows(coupling_model, loads, case, part)
        put("v", coupling_model.targets["v"], s1.v, -1)
        put("dtheta", coupling_model.targets["dtheta"], s1.dtheta, -1)
    for k in range(part.K):
        m = by_region[k]
        X, _, _ = regional_features(case, part, k, loads, s1)
        for f, y in m.predict(X).items():
            put(f, m.targets[f], y, k)
    return _finish_prediction(case, arrays["v"], arrays["dtheta"], arrays["p_g"], arrays["q_g"], source)


def predict_direct(model: DirectModel, loads: LoadProfile, case: NetworkCase) -> OpfPrediction:
    if model.case_hash != case.content_hash:
        raise ValueError(f"model was trained on case {model.case_hash}, not {case.content_hash}")
    out = model.predict(_load_features(case, loads))
    B = next(iter(out.values())).shape[0]
    full = {"v": np.ones((B, case.n_bus)), "dtheta": np.zeros((B, case.n_branch)),
            "p_g": np.zeros((B, case.n_gen)), "q_g": np.zeros((B, case.n_gen))}
    source = {f: (np.zeros(a.shape[1], np.int64), np.zeros(a.shape[1], np.int64)) for f, a in full.items()}
    for f, y in out.items():
        full[f][:, model.targets[f]] = y
        source[f][1][model.targets[f]] += 1
    return _finish_prediction(case, full["v"], full["dtheta"], full["p_g"], full["q_g"], source)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
