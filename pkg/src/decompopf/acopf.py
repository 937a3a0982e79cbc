"""AC-OPF evaluation: arc flows, their derivatives, balance residuals,
objective and constraint violations.

Every routine accepts leading batch dimensions, so the same code evaluates
one solution, a mini-batch of predictions, or a whole dataset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import NetworkCase

KINDS = ("v_bound", "p_bound", "q_bound", "thermal", "p_balance", "q_balance")


# --------------------------------------------------------------------------- arc physics


def arc_flow(vi, vj, d, gii, bii, gij, bij):
    """Active/reactive flow leaving bus i on an arc with coefficients (gii, bii, gij, bij)."""
    c, s = np.cos(d), np.sin(d)
    vv = vi * vj
    p = gii * vi * vi + vv * (gij * c + bij * s)
    q = -bii * vi * vi + vv * (gij * s - bij * c)
    return p, q


def arc_flow_partials(vi, vj, d, gii, bii, gij, bij):
    """First partials of (p, q) w.r.t. (vi, vj, d), as two 3-tuples."""
    c, s = np.cos(d), np.sin(d)
    a = gij * c + bij * s
    bb = gij * s - bij * c
    vv = vi * vj
    dp = (2 * gii * vi + vj * a, vi * a, -vv * bb)
    dq = (-2 * bii * vi + vj * bb, vi * bb, vv * a)
    return dp, dq


def arc_flow_hessians(vi, vj, d, gii, bii, gij, bij):
    """Second partials of p and q, ordered (vivi, vivj, vid, vjvj, vjd, dd)."""
    c, s = np.cos(d), np.sin(d)
    a = gij * c + bij * s
    bb = gij * s - bij * c
    vv = vi * vj
    zero = np.zeros_like(vv)
    hp = (2 * gii + zero, a, -vj * bb, zero, -vi * bb, -vv * a)
    hq = (-2 * bii + zero, bb, vj * a, zero, vi * a, -vv * bb)
    return hp, hq


def branch_flow(v_i, v_j, dtheta, g, b):
    """Flow on a plain series branch (no charging, unit tap)."""
    return arc_flow(v_i, v_j, dtheta, g, b, -g, -b)


def branch_flow_grad(v_i, v_j, dtheta, g, b):
    """Partials ((dp/dvi, dp/dvj, dp/ddtheta), (dq/dvi, dq/dvj, dq/ddtheta))."""
    return arc_flow_partials(v_i, v_j, dtheta, g, b, -g, -b)


def violation_of(kind: str, f_value):
    """Violation of ``f >= 0`` (kind 'inequality') or ``f == 0`` (kind 'equality')."""
    if kind == "inequality":
        return np.maximum(0.0, -np.asarray(f_value, dtype=float))
    if kind == "equality":
        return np.abs(np.asarray(f_value, dtype=float))
    raise ValueError(f"unknown constraint kind {kind!r}")


def thermal_violation(p_f, q_f, s_max):
    return np.maximum(0.0, np.hypot(p_f, q_f) - s_max)


def bound_violation(x, lo, hi):
    return np.maximum(0.0, lo - x) + np.maximum(0.0, x - hi)


# --------------------------------------------------------------------------- solutions


@dataclass(frozen=True)
class LoadProfile:
    p_d: np.ndarray
    q_d: np.ndarray

    @classmethod
    def nominal(cls, case: NetworkCase, scale: float = 1.0) -> "LoadProfile":
        return cls(case.nominal_pd * scale, case.nominal_qd * scale)


@dataclass(frozen=True)
class OpfSolution:
    """(v, theta, p_g, q_g) plus per-branch angle differences and per-arc flows.

    Predictions carry ``dtheta`` only; solver output also carries absolute
    ``theta``. Arrays may have a leading batch axis.
    """

    v: np.ndarray
    dtheta: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray
    theta: np.ndarray | None = None
    p_f: np.ndarray | None = None
    q_f: np.ndarray | None = None

    @classmethod
    def build(cls, case: NetworkCase, v, p_g, q_g, *, theta=None, dtheta=None) -> "OpfSolution":
        v = np.asarray(v, dtype=float)
        if dtheta is None:
            if theta is None:
                raise ValueError("need theta or dtheta")
            theta = np.asarray(theta, dtype=float)
            dtheta = theta[..., case.branch_from] - theta[..., case.branch_to]
        dtheta = np.asarray(dtheta, dtype=float)
        if np.any(v <= 0):
            raise ValueError("voltage magnitudes must be positive")
        p_f, q_f = arc_flows(case, v, dtheta)
        return cls(v=v, dtheta=dtheta, p_g=np.asarray(p_g, dtype=float), q_g=np.asarray(q_g, dtype=float),
                   theta=theta, p_f=p_f, q_f=q_f)


def arc_flows(case: NetworkCase, v, dtheta):
    """Flows on all 2*|E| arcs from bus voltages and per-branch angle differences."""
    v = np.asarray(v, dtype=float)
    d = np.asarray(dtheta, dtype=float)
    d_arc = np.concatenate([d, -d], axis=-1)
    coef = case.arc_coef
    return arc_flow(v[..., case.arc_from], v[..., case.arc_to], d_arc,
                    coef[:, 0], coef[:, 1], coef[:, 2], coef[:, 3])


def gen_injection(case: NetworkCase, x_gen):
    """Sum per-generator quantities onto buses (batch aware)."""
    x_gen = np.asarray(x_gen, dtype=float)
    out = np.zeros(x_gen.shape[:-1] + (case.n_bus,))
    np.add.at(out, (..., case.gen_bus), x_gen)
    return out


def _bus_sum(case: NetworkCase, arc_values, arc_mask=None):
    out = np.zeros(arc_values.shape[:-1] + (case.n_bus,))
    if arc_mask is None:
        np.add.at(out, (..., case.arc_from), arc_values)
    else:
        idx = np.flatnonzero(arc_mask)
        np.add.at(out, (..., case.arc_from[idx]), arc_values[..., idx])
    return out


@dataclass(frozen=True)
class CouplingFlows:
    """Externally supplied flows on a subset of arcs (first-stage predictions)."""

    arcs: np.ndarray
    p_f: np.ndarray
    q_f: np.ndarray


def balance_residual(case: NetworkCase, loads: LoadProfile, sol: OpfSolution,
                     coupling: CouplingFlows | None = None):
    """Per-bus (dp, dq) = injection - demand - shunt - outgoing flow.

    With ``coupling`` the listed arcs use the supplied flows instead of the
    flows derived from ``sol``.
    """
    if sol.p_f is None or sol.q_f is None:
        raise ValueError("solution carries no flows; build it with OpfSolution.build")
    p_f, q_f = sol.p_f, sol.q_f
    if coupling is not None:
        p_f = np.array(p_f, copy=True)
        q_f = np.array(q_f, copy=True)
        p_f[..., coupling.arcs] = coupling.p_f
        q_f[..., coupling.arcs] = coupling.q_f
    v2 = sol.v * sol.v
    dp = gen_injection(case, sol.p_g) - loads.p_d - case.g_sh * v2 - _bus_sum(case, p_f)
    dq = gen_injection(case, sol.q_g) - loads.q_d + case.b_sh * v2 - _bus_sum(case, q_f)
    return dp, dq


def objective(case: NetworkCase, p_g):
    """Generation cost, summed over generators (batch aware)."""
    p = np.asarray(p_g, dtype=float)
    c = case.cost_coef
    return np.sum((c[:, 0] * p + c[:, 1]) * p + c[:, 2], axis=-1)


class ViolationVector(dict):
    """Constraint kind -> array of nonnegative violations (one per instance)."""

    def max(self) -> float:
        return max((float(np.max(a)) for a in self.values() if np.size(a)), default=0.0)

    def mean_by_kind(self) -> dict[str, float]:
        return {k: float(np.mean(a)) if np.size(a) else 0.0 for k, a in self.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self[k]) for k in KINDS if k in self])


def all_violations(case: NetworkCase, loads: LoadProfile, sol: OpfSolution) -> ViolationVector:
    """Violations of bounds, thermal limits and power balance.

    Flows are recomputed from (v, dtheta) so the flow-definition equalities
    hold by construction and are not listed.
    """
    full = OpfSolution.build(case, sol.v, sol.p_g, sol.q_g, dtheta=sol.dtheta)
    dp, dq = balance_residual(case, loads, full)
    return ViolationVector(
        v_bound=bound_violation(full.v, case.v_min, case.v_max),
        p_bound=bound_violation(full.p_g, case.p_min, case.p_max),
        q_bound=bound_violation(full.q_g, case.q_min, case.q_max),
        thermal=thermal_violation(full.p_f, full.q_f, case.arc_smax),
        p_balance=np.abs(dp),
        q_balance=np.abs(dq),
    )
