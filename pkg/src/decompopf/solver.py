"""Nonlinear AC-OPF and load-flow projection by a primal-dual log-barrier
interior-point method on the polar formulation.

Decision vector: ``x = [theta (n), v (n), p_g (ng), q_g (ng)]``. The
reference angle and any variable with coincident bounds are eliminated.
Equalities are the nodal active/reactive balances, inequalities the
squared apparent-power limits of every arc with a finite rating plus the
variable bounds. Each iteration solves the barrier KKT system

    [ Lxx + Jh' Z^-1 M Jh   Jg' ] [dx]   [ -(Lx + Jh' Z^-1 (M h + gamma)) ]
    [ Jg                     0  ] [dl] = [ -g                             ]

and takes the largest step keeping slacks and multipliers positive
(fraction-to-boundary 0.99995). ``gamma`` follows ``shrink * z'mu / m``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import acopf
from .acopf import LoadProfile, OpfSolution
from .netmodel import NetworkCase

log = logging.getLogger(__name__)

__all__ = ["SolveOptions", "SolveReport", "SolverError", "solve_acopf", "solve_loadflow",
           "newton_power_flow", "objective_gap"]

_XI = 0.99995


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    tol_feas: float = 1e-8
    tol_opt: float = 1e-6
    max_iter: int = 200
    barrier_mu0: float = 1.0
    barrier_shrink: float = 0.1
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if not (self.tol_feas > 0 and self.tol_opt > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.barrier_shrink < 1:
            raise ValueError("barrier_shrink must lie in (0, 1)")
        if self.max_iter < 1 or self.barrier_mu0 <= 0:
            raise ValueError("max_iter and barrier_mu0 must be positive")


@dataclass
class SolveReport:
    status: str
    iterations: int
    final_feas: float
    objective: float
    wall_time: float
    distance: float | None = None
    feas_history: list[float] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        return {"status": self.status, "iterations": self.iterations, "final_feas": self.final_feas,
                "objective": self.objective, "distance": self.distance}


def objective_gap(cost_lf: float, cost_ac: float) -> float:
    """|1 - cost_lf / cost_ac| in percent."""
    if not cost_ac > 0:
        raise ValueError(f"reference cost must be positive, got {cost_ac}")
    return abs(1.0 - cost_lf / cost_ac) * 100.0


# --------------------------------------------------------------------------- problem assembly


class _Layout:
    """Index bookkeeping for the polar decision vector."""

    def __init__(self, case: NetworkCase):
        n, ng = case.n_bus, case.n_gen
        self.n, self.ng = n, ng
        self.th = np.arange(n)
        self.vm = n + np.arange(n)
        self.pg = 2 * n + np.arange(ng)
        self.qg = 2 * n + ng + np.arange(ng)
        self.nx = 2 * n + 2 * ng
        lo = np.concatenate([np.full(n, -np.inf), case.v_min, case.p_min, case.q_min])
        hi = np.concatenate([np.full(n, np.inf), case.v_max, case.p_max, case.q_max])
        fixed = lo == hi
        fixed[case.ref_bus] = True
        self.lo, self.hi = lo, hi
        self.free = np.flatnonzero(~fixed)
        self.fixed = np.flatnonzero(fixed)
        self.therm = np.flatnonzero(np.isfinite(case.arc_smax))

    def split(self, x):
        return x[self.th], x[self.vm], x[self.pg], x[self.qg]


def _arc_terms(case: NetworkCase, theta, v, hessians: bool):
    """Arc flows with gradients/Hessians w.r.t. local (v_i, v_j, th_i, th_j)."""
    f, t = case.arc_from, case.arc_to
    c = case.arc_coef
    args = (v[f], v[t], theta[f] - theta[t], c[:, 0], c[:, 1], c[:, 2], c[:, 3])
    p, q = acopf.arc_flow(*args)
    dp, dq = acopf.arc_flow_partials(*args)
    gp = np.stack([dp[0], dp[1], dp[2], -dp[2]], axis=1)
    gq = np.stack([dq[0], dq[1], dq[2], -dq[2]], axis=1)
    if not hessians:
        return p, q, gp, gq, None, None
    hp3, hq3 = acopf.arc_flow_hessians(*args)
    return p, q, gp, gq, _lift(hp3), _lift(hq3)


def _lift(h3):
    """Map a (vi, vj, d) Hessian to (vi, vj, th_i, th_j) with d = th_i - th_j."""
    aa, ab, ad, bb, bd, dd = h3
    na = aa.shape[0]
    H = np.empty((na, 4, 4))
    H[:, 0, 0], H[:, 0, 1], H[:, 1, 1] = aa, ab, bb
    H[:, 0, 2], H[:, 0, 3] = ad, -ad
    H[:, 1, 2], H[:, 1, 3] = bd, -bd
    H[:, 2, 2], H[:, 3, 3], H[:, 2, 3] = dd, dd, -dd
    for r in range(4):
        for s in range(r):
            H[:, r, s] = H[:, s, r]
    return H


class _Problem:
    """f, g, h and their derivatives for a given objective callback."""

    def __init__(self, case: NetworkCase, loads: LoadProfile, objective):
        self.case, self.loads, self.objective = case, loads, objective
        self.L = _Layout(case)
        L = self.L
        self.arc_cols = np.stack([L.vm[case.arc_from], L.vm[case.arc_to],
                                  L.th[case.arc_from], L.th[case.arc_to]], axis=1)
        self.arc_rows = case.arc_from
        # constant generator part of the balance Jacobian
        self.gen_rows = np.concatenate([case.gen_bus, L.n + case.gen_bus])
        self.gen_cols = np.concatenate([L.pg, L.qg])
        # variable bound rows
        fr = L.free
        self.lo_idx = fr[np.isfinite(L.lo[fr])]
        self.hi_idx = fr[np.isfinite(L.hi[fr])]

    # equality constraints -------------------------------------------------
    def eq(self, x, need_jac=True):
        case, L = self.case, self.L
        th, v, pg, qg = L.split(x)
        p, q, gp, gq, _, _ = _arc_terms(case, th, v, hessians=False)
        sol = OpfSolution(v=v, dtheta=th[case.branch_from] - th[case.branch_to], p_g=pg, q_g=qg,
                          p_f=p, q_f=q)
        dp, dq = acopf.balance_residual(case, self.loads, sol)
        g = np.concatenate([dp, dq])
        if not need_jac:
            return g, None, (p, q, gp, gq)
        n = L.n
        rows = [np.repeat(self.arc_rows, 4), np.repeat(n + self.arc_rows, 4), self.gen_rows,
                np.arange(n), n + np.arange(n)]
        cols = [self.arc_cols.ravel(), self.arc_cols.ravel(), self.gen_cols, L.vm, L.vm]
        vals = [-gp.ravel(), -gq.ravel(), np.ones(2 * case.n_gen), -2 * case.g_sh * v, 2 * case.b_sh * v]
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * n, L.nx))
        return g, J, (p, q, gp, gq)

    # inequality constraints ----------------------------------------------
    def ineq(self, x, flows):
        L = self.L
        p, q, gp, gq = flows
        t = L.therm
        smax = self.case.arc_smax[t]
        h_th = p[t] ** 2 + q[t] ** 2 - smax ** 2
        h = np.concatenate([h_th, L.lo[self.lo_idx] - x[self.lo_idx], x[self.hi_idx] - L.hi[self.hi_idx]])
        nt = len(t)
        gth = 2 * (p[t, None] * gp[t] + q[t, None] * gq[t])
        nlo, nhi = len(self.lo_idx), len(self.hi_idx)
        rows = np.concatenate([np.repeat(np.arange(nt), 4), nt + np.arange(nlo), nt + nlo + np.arange(nhi)])
        cols = np.concatenate([self.arc_cols[t].ravel(), self.lo_idx, self.hi_idx])
        vals = np.concatenate([gth.ravel(), -np.ones(nlo), np.ones(nhi)])
        J = sp.csr_matrix((vals, (rows, cols)), shape=(nt + nlo + nhi, L.nx))
        return h, J

    # Hessian of the Lagrangian ---------------------------------------------
    def hess(self, x, lam, mu):
        case, L = self.case, self.L
        th, v, pg, qg = L.split(x)
        p, q, gp, gq, Hp, Hq = _arc_terms(case, th, v, hessians=True)
        n = L.n
        lp, lq = lam[:n], lam[n:]
        # balance terms: g_p,i = ... - sum p_a, weight -lambda on arc Hessians
        W = -(lp[self.arc_rows, None, None] * Hp + lq[self.arc_rows, None, None] * Hq)
        t = L.therm
        if len(t):
            m = mu[:len(t)]
            Ht = 2 * (np.einsum("ai,aj->aij", gp[t], gp[t]) + p[t, None, None] * Hp[t]
                      + np.einsum("ai,aj->aij", gq[t], gq[t]) + q[t, None, None] * Hq[t])
            W[t] += m[:, None, None] * Ht
        cols = self.arc_cols
        rows_ = np.repeat(cols, 4, axis=1).ravel()
        cols_ = np.tile(cols, (1, 4)).ravel()
        Hf = self.objective.hess(x, L)
        diag = -2 * case.g_sh * lp + 2 * case.b_sh * lq
        H = sp.csr_matrix((W.ravel(), (rows_, cols_)), shape=(L.nx, L.nx))
        H = H + sp.csr_matrix((diag, (L.vm, L.vm)), shape=(L.nx, L.nx)) + Hf
        return H


class _GenCost:
    def __init__(self, case: NetworkCase):
        self.c = case.cost_coef
        slope = np.abs(self.c[:, 1]) + 2 * self.c[:, 0] * np.maximum(np.abs(case.p_max), np.abs(case.p_min))
        self.scale = 1.0 / max(1.0, float(np.max(slope, initial=1.0)))

    def value(self, x, L):
        p = x[L.pg]
        return self.scale * float(np.sum((self.c[:, 0] * p + self.c[:, 1]) * p + self.c[:, 2]))

    def grad(self, x, L):
        gr = np.zeros(L.nx)
        gr[L.pg] = self.scale * (2 * self.c[:, 0] * x[L.pg] + self.c[:, 1])
        return gr

    def hess(self, x, L):
        return sp.csr_matrix((self.scale * 2 * self.c[:, 0], (L.pg, L.pg)), shape=(L.nx, L.nx))


class _Distance:
    """||p_g - p_hat||^2 + ||v - v_hat||^2 (unweighted, per-unit)."""

    def __init__(self, v_hat, p_hat):
        self.v_hat, self.p_hat = np.asarray(v_hat, float), np.asarray(p_hat, float)

    def value(self, x, L):
        return float(np.sum((x[L.pg] - self.p_hat) ** 2) + np.sum((x[L.vm] - self.v_hat) ** 2))

    def grad(self, x, L):
        gr = np.zeros(L.nx)
        gr[L.pg] = 2 * (x[L.pg] - self.p_hat)
        gr[L.vm] = 2 * (x[L.vm] - self.v_hat)
        return gr

    def hess(self, x, L):
        idx = np.concatenate([L.pg, L.vm])
        return sp.csr_matrix((np.full(len(idx), 2.0), (idx, idx)), shape=(L.nx, L.nx))


# --------------------------------------------------------------------------- interior point


def _interior_point(prob: _Problem, x0: np.ndarray, opts: SolveOptions):
    L = prob.L
    F = L.free
    x = x0.copy()
    g, Jg, flows = prob.eq(x)
    h, Jh = prob.ineq(x, flows)
    m = len(h)
    z0 = 1.0
    z = np.full(m, z0)
    k = h < -z0
    z[k] = -h[k]
    gamma = opts.barrier_mu0
    mu = gamma / z
    lam = np.zeros(len(g))
    f = prob.objective.value(x, L)
    history = []
    status = "iteration-limit"
    it = 0
    best = (np.inf, x.copy())
    for it in range(1, opts.max_iter + 1):
        df = prob.objective.grad(x, L)
        Lx = (df + Jg.T @ lam + Jh.T @ mu)[F]
        H = prob.hess(x, lam, mu)[F][:, F]
        JgF = Jg[:, F]
        JhF = Jh[:, F]
        zinv = 1.0 / z
        dhz = JhF.T @ sp.diags(zinv)
        M = H + dhz @ sp.diags(mu) @ JhF
        N = Lx + dhz @ (mu * h + gamma)
        neq = JgF.shape[0]
        K = sp.bmat([[M, JgF.T], [JgF, None]], format="csc")
        rhs = np.concatenate([-N, -g])
        try:
            sol = spla.splu(K).solve(rhs)
        except RuntimeError:
            K = K + sp.diags(np.concatenate([np.full(len(F), 1e-8), np.full(neq, -1e-8)]), format="csc")
            try:
                sol = spla.splu(K).solve(rhs)
            except RuntimeError:
                status = "infeasible"
                break
        if not np.all(np.isfinite(sol)):
            status = "infeasible"
            break
        dxF, dlam = sol[:len(F)], sol[len(F):]
        dz = -h - z - JhF @ dxF
        dmu = -mu + zinv * (gamma - mu * dz)
        neg = dz < 0
        alpha_p = min(_XI * float(np.min(-z[neg] / dz[neg])), 1.0) if np.any(neg) else 1.0
        neg = dmu < 0
        alpha_d = min(_XI * float(np.min(-mu[neg] / dmu[neg])), 1.0) if np.any(neg) else 1.0
        x[F] += alpha_p * dxF
        z += alpha_p * dz
        lam += alpha_d * dlam
        mu += alpha_d * dmu
        if m:
            gamma = opts.barrier_shrink * float(z @ mu) / m
        g, Jg, flows = prob.eq(x)
        h, Jh = prob.ineq(x, flows)
        f_new = prob.objective.value(x, L)
        feas = max(float(np.max(np.abs(g))), float(np.max(h, initial=0.0)))
        history.append(feas)
        if opts.debug and len(history) > 1 and feas > history[-2]:
            log.debug("feasibility increased at iteration %d: %.3e -> %.3e", it, history[-2], feas)
        if feas < best[0]:
            best = (feas, x.copy())
        grad_res = (prob.objective.grad(x, L) + Jg.T @ lam + Jh.T @ mu)[F]
        gradcond = float(np.max(np.abs(grad_res))) / (1 + max(float(np.max(np.abs(lam))), float(np.max(mu, initial=0.0))))
        compcond = float(z @ mu) / (1 + float(np.max(np.abs(x[F])))) if m else 0.0
        costcond = abs(f_new - f) / (1 + abs(f))
        f = f_new
        if not np.isfinite(feas) or feas > 1e10:
            status = "infeasible"
            break
        if feas <= opts.tol_feas and gradcond <= opts.tol_opt and compcond <= opts.tol_opt \
                and costcond <= max(opts.tol_opt, 1e-12) * 10:
            status = "converged"
            break
    if status != "converged" and best[0] < np.inf:
        x = best[1]
    return x, status, it, history


def _pack(case: NetworkCase, L: _Layout, theta, v, pg, qg):
    x = np.zeros(L.nx)
    x[L.th], x[L.vm], x[L.pg], x[L.qg] = theta, v, pg, qg
    return x


def _finish(case, loads, prob, x, status, iters, history, t0, opts, distance=None):
    L = prob.L
    th, v, pg, qg = L.split(x)
    sol = OpfSolution.build(case, v, pg, qg, theta=th)
    viol = acopf.all_violations(case, loads, sol)
    feas = viol.max()
    if status == "converged" and feas > opts.tol_feas:
        status = "iteration-limit"
    report = SolveReport(status=status, iterations=iters, final_feas=feas,
                         objective=float(acopf.objective(case, pg)), wall_time=time.perf_counter() - t0,
                         distance=distance, feas_history=history)
    return sol, report


def _flat_start(case: NetworkCase, L: _Layout):
    pg = 0.5 * (case.p_min + case.p_max)
    qg = 0.5 * (case.q_min + case.q_max)
    v = np.clip(np.ones(case.n_bus), case.v_min, case.v_max)
    return _pack(case, L, np.zeros(case.n_bus), v, pg, qg)


def solve_acopf(case: NetworkCase, loads: LoadProfile, options: SolveOptions | None = None):
    """Minimum-cost dispatch; returns (OpfSolution, SolveReport).

    On failure from flat start, a Newton power flow at the best iterate's
    dispatch seeds one more interior-point run.
    """
    opts = options or SolveOptions()
    t0 = time.perf_counter()
    prob = _Problem(case, loads, _GenCost(case))
    L = prob.L
    x0 = _flat_start(case, L)
    x, status, iters, hist = _interior_point(prob, x0, opts)
    if status != "converged":
        th, v, pg, qg = L.split(x)
        try:
            restored = newton_power_flow(case, loads, v, pg)
        except SolverError:
            restored = None
        if restored is not None:
            x1 = _pack(case, L, restored.theta, restored.v, restored.p_g, restored.q_g)
            x1 = _clip_into(x1, L)
            x, status, it2, h2 = _interior_point(prob, x1, opts)
            iters += it2
            hist += h2
    return _finish(case, loads, prob, x, status, iters, hist, t0, opts)


def _clip_into(x, L: _Layout, margin=1e-6):
    lo, hi = L.lo, L.hi
    width = np.where(np.isfinite(hi - lo), hi - lo, 0.0)
    lo_ = np.where(np.isfinite(lo), lo + margin * width, -np.inf)
    hi_ = np.where(np.isfinite(hi), hi - margin * width, np.inf)
    return np.clip(x, lo_, hi_)


def solve_loadflow(case: NetworkCase, loads: LoadProfile, prediction: OpfSolution,
                   options: SolveOptions | None = None):
    """Feasible point closest to a prediction in (p_g, v).

    The start point is a Newton power flow at the predicted setpoints, so a
    good prediction begins close to feasibility; the barrier therefore starts
    small (``min(barrier_mu0, 1e-3)``).
    """
    opts = options or SolveOptions()
    t0 = time.perf_counter()
    v_hat = np.asarray(prediction.v, float)
    p_hat = np.asarray(prediction.p_g, float)
    prob = _Problem(case, loads, _Distance(v_hat, p_hat))
    L = prob.L
    try:
        start = newton_power_flow(case, loads, v_hat, p_hat)
        x0 = _pack(case, L, start.theta, start.v, start.p_g, start.q_g)
    except SolverError:
        qg = np.clip(np.asarray(prediction.q_g, float), case.q_min, case.q_max)
        x0 = _pack(case, L, np.zeros(case.n_bus), v_hat, p_hat, qg)
    x0 = _clip_into(x0, L)
    warm = replace(opts, barrier_mu0=min(opts.barrier_mu0, 1e-3))
    x, status, iters, hist = _interior_point(prob, x0, warm)
    if status != "converged":
        x, status, it2, h2 = _interior_point(prob, _flat_start(case, L), opts)
        iters += it2
        hist += h2
    dist = prob.objective.value(x, L)
    return _finish(case, loads, prob, x, status, iters, hist, t0, opts, distance=dist)


# --------------------------------------------------------------------------- Newton power flow


def newton_power_flow(case: NetworkCase, loads: LoadProfile, v_set, p_g, *, tol=1e-10, max_iter=30):
    """Classical polar Newton-Raphson power flow at a fixed dispatch.

    Generator buses hold ``v_set``, non-reference generators inject ``p_g``;
    the reference bus absorbs the active mismatch. Reactive output at each
    generator bus is split equally among its generators. Generator limits
    are not enforced.
    """
    n = case.n_bus
    L = _Layout(case)
    ref = case.ref_bus
    gen_buses = np.unique(case.gen_bus)
    pv = np.zeros(n, dtype=bool)
    pv[gen_buses] = True
    pq = ~pv
    pq[ref] = False
    ang = np.setdiff1d(np.arange(n), [ref])
    vq = np.flatnonzero(pq)
    v = np.where(pv, np.asarray(v_set, float), 1.0)
    v[pq] = np.clip(np.asarray(v_set, float)[pq], 0.8, 1.2)
    theta = np.zeros(n)
    pg = np.asarray(p_g, float).copy()
    prob = _Problem(case, loads, _GenCost(case))
    rows = np.concatenate([ang, n + vq])
    cols = np.concatenate([L.th[ang], L.vm[vq]])
    for _ in range(max_iter):
        x = _pack(case, L, theta, v, pg, np.zeros(case.n_gen))
        g, J, _ = prob.eq(x)
        mis = g[rows]
        if np.max(np.abs(mis)) < tol:
            break
        step = spla.spsolve(J[rows][:, cols].tocsc(), -mis)
        if not np.all(np.isfinite(step)):
            raise SolverError("singular power-flow Jacobian")
        theta[ang] += step[:len(ang)]
        v[vq] += step[len(ang):]
        if np.any(v <= 0):
            raise SolverError("power flow diverged (nonpositive voltage)")
    else:
        raise SolverError("power flow did not converge")
    x = _pack(case, L, theta, v, pg, np.zeros(case.n_gen))
    g, _, _ = prob.eq(x)
    # reference bus absorbs active mismatch, generator buses absorb reactive mismatch
    at_ref = np.flatnonzero(case.gen_bus == ref)
    pg[at_ref] -= g[ref] / len(at_ref)
    qg = np.zeros(case.n_gen)
    counts = np.bincount(case.gen_bus, minlength=n)
    qg -= g[n + case.gen_bus] / counts[case.gen_bus]
    return OpfSolution.build(case, v, pg, qg, theta=theta)


def cold_start_objective(case: NetworkCase, loads: LoadProfile) -> float:
    """Convenience: optimal cost from a cold solve (raises when not converged)."""
    sol, rep = solve_acopf(case, loads)
    if not rep.converged:
        raise SolverError(f"AC-OPF did not converge: {rep.status}")
    return rep.objective

