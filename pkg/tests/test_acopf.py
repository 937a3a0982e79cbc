import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decompopf import parse_case
from decompopf.acopf import (CouplingFlows, LoadProfile, OpfSolution, all_violations, balance_residual,
                             branch_flow, branch_flow_grad, objective, thermal_violation, violation_of)
from decompopf.solver import solve_acopf

# 50-digit mpmath evaluation of the closed form at g=1, b=-5, vi=1.02, vj=0.98, d=0.05
ORACLE_P = 0.29184512772404202725
ORACLE_Q = 0.16028702094298864222

LOSSLESS = {
    "base_mva": 100.0,
    "buses": [{"id": i, "v_min": 0.9, "v_max": 1.1, "is_ref": i == 1} for i in (1, 2, 3)],
    "branches": [
        {"from_bus": 1, "to_bus": 2, "g": 0.0, "b": -10.0},
        {"from_bus": 2, "to_bus": 3, "g": 0.0, "b": -5.0},
        {"from_bus": 1, "to_bus": 3, "g": 0.0, "b": -4.0},
    ],
    "generators": [{"bus": 1, "p_min": 0, "p_max": 2, "q_min": -1, "q_max": 1, "cost": {"c1": 1.0}}],
    "loads": [{"bus": 2, "p_nom": 0.5, "q_nom": 0.1}, {"bus": 3, "p_nom": 0.3, "q_nom": 0.05}],
}


def test_flat_voltage_zero_flow():
    assert branch_flow(1.0, 1.0, 0.0, 0.7, -3.2) == pytest.approx((0.0, 0.0), abs=1e-15)


def test_lossless_closed_form():
    p, q = branch_flow(1.0, 1.0, 0.1, 0.0, -5.0)
    assert p == pytest.approx(5 * math.sin(0.1), rel=1e-15)
    # both ends feed the reactive loss of a series inductor, so q > 0
    assert q == pytest.approx(5 * (1 - math.cos(0.1)), rel=1e-12)


def test_high_precision_oracle():
    p, q = branch_flow(1.02, 0.98, 0.05, 1.0, -5.0)
    assert p == pytest.approx(ORACLE_P, rel=1e-14)
    assert q == pytest.approx(ORACLE_Q, rel=1e-14)


def test_grad_matches_central_differences():
    rng = np.random.default_rng(0)
    h = 1e-7
    worst = 0.0
    for _ in range(100):
        x = np.array([rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1), rng.uniform(-0.5, 0.5)])
        g, b = rng.uniform(0, 5), rng.uniform(-30, -1)
        dp, dq = branch_flow_grad(*x, g, b)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fp = np.array(branch_flow(*(x + e), g, b))
            fm = np.array(branch_flow(*(x - e), g, b))
            num = (fp - fm) / (2 * h)
            ana = np.array([dp[k], dq[k]])
            worst = max(worst, np.max(np.abs(num - ana) / np.maximum(np.abs(ana), 1.0)))
    assert worst <= 1e-6


def test_grad_at_origin():
    dp, _ = branch_flow_grad(1.0, 1.0, 0.0, 0.3, -7.0)
    assert dp[2] == pytest.approx(7.0)


def test_grad_zero_for_open_line():
    dp, dq = branch_flow_grad(1.03, 0.97, 0.2, 0.0, 0.0)
    assert np.all(np.array(dp) == 0) and np.all(np.array(dq) == 0)


@settings(max_examples=100, deadline=None)
@given(vi=st.floats(0.5, 1.5), vj=st.floats(0.5, 1.5), d=st.floats(-1, 1), b=st.floats(-50, 50))
def test_lossless_antisymmetry(vi, vj, d, b):
    pij, _ = branch_flow(vi, vj, d, 0.0, b)
    pji, _ = branch_flow(vj, vi, -d, 0.0, b)
    assert pij == pytest.approx(-pji, abs=1e-12)


@pytest.mark.parametrize("kind, f, nu", [("inequality", -2.0, 2.0), ("inequality", 3.0, 0.0),
                                         ("equality", -0.4, 0.4), ("inequality", 0.0, 0.0)])
def test_violation_of(kind, f, nu):
    assert violation_of(kind, f) == nu


@settings(max_examples=100, deadline=None)
@given(f=st.floats(-1e6, 1e6))
def test_violation_sign(f):
    nu = violation_of("inequality", f)
    assert nu >= 0
    assert (nu == 0) == (f >= 0)


def test_thermal_examples():
    assert thermal_violation(0.3, 0.4, 1.0) == 0
    assert thermal_violation(3.0, 4.0, 1.0) == pytest.approx(4.0)
    rng = np.random.default_rng(1)
    p, q, s = rng.normal(size=50), rng.normal(size=50), rng.uniform(0.1, 2, 50)
    direct = np.array([max(0.0, math.sqrt(a * a + b * b) - c) for a, b, c in zip(p, q, s)])
    assert np.max(np.abs(thermal_violation(p, q, s) - direct)) <= 1e-12


def test_objective_examples(case118):
    one = parse_case(json.dumps({**LOSSLESS, "generators": [
        {"bus": 1, "p_min": 0, "p_max": 5, "q_min": -1, "q_max": 1, "cost": {"c2": 0, "c1": 10, "c0": 5}}]}))
    assert objective(one, [2.0]) == pytest.approx(25.0)
    assert objective(parse_case(json.dumps(LOSSLESS)), [0.0]) == 0.0
    rng = np.random.default_rng(2)
    pg = rng.uniform(case118.p_min, case118.p_max)
    by_row = sum(g.cost.c2 * p * p + g.cost.c1 * p + g.cost.c0 for g, p in zip(case118.generators, pg))
    assert objective(case118, pg) == pytest.approx(by_row, rel=1e-12)
    perm = rng.permutation(case118.n_gen)
    reordered = sum((case118.cost_coef[perm, 0] * pg[perm] + case118.cost_coef[perm, 1]) * pg[perm]
                    + case118.cost_coef[perm, 2])
    assert objective(case118, pg) == pytest.approx(reordered, rel=1e-12)


def test_balance_hand_computed():
    case = parse_case(json.dumps(LOSSLESS))
    theta = np.array([0.0, -0.1, -0.05])
    sol = OpfSolution.build(case, np.ones(3), [0.9], [0.2], theta=theta)
    dp, dq = balance_residual(case, LoadProfile.nominal(case), sol)
    s = math.sin
    expect_p = [0.9 - 10 * s(0.1) - 4 * s(0.05),
                -0.5 - 10 * s(-0.1) - 5 * s(-0.05),
                -0.3 - 5 * s(0.05) - 4 * s(-0.05)]
    c = math.cos
    expect_q = [0.2 - 10 * (1 - c(0.1)) - 4 * (1 - c(0.05)),
                -0.1 - 10 * (1 - c(0.1)) - 5 * (1 - c(0.05)),
                -0.05 - 5 * (1 - c(0.05)) - 4 * (1 - c(0.05))]
    assert dp == pytest.approx(expect_p, abs=1e-14)
    assert dq == pytest.approx(expect_q, abs=1e-14)


def test_passive_bus_flat_zero():
    case = parse_case(json.dumps(LOSSLESS))
    sol = OpfSolution.build(case, np.ones(3), [0.0], [0.0], dtheta=np.zeros(3))
    dp, dq = balance_residual(case, LoadProfile(np.zeros(3), np.zeros(3)), sol)
    assert np.all(dp == 0) and np.all(dq == 0)


def test_coupling_flows_replace_arc_terms():
    case = parse_case(json.dumps(LOSSLESS))
    sol = OpfSolution.build(case, np.ones(3), [0.9], [0.2], dtheta=np.array([0.1, -0.05, 0.05]))
    loads = LoadProfile.nominal(case)
    base_p, base_q = balance_residual(case, loads, sol)
    cf = CouplingFlows(arcs=np.array([1]), p_f=np.array([0.7]), q_f=np.array([-0.2]))
    dp, dq = balance_residual(case, loads, sol, coupling=cf)
    # arc 1 leaves bus 2
    assert dp[1] == pytest.approx(base_p[1] + sol.p_f[1] - 0.7)
    assert dq[1] == pytest.approx(base_q[1] + sol.q_f[1] + 0.2)
    assert dp[[0, 2]] == pytest.approx(base_p[[0, 2]])


def test_missing_flows_rejected():
    case = parse_case(json.dumps(LOSSLESS))
    sol = OpfSolution(v=np.ones(3), dtheta=np.zeros(3), p_g=np.zeros(1), q_g=np.zeros(1))
    with pytest.raises(ValueError, match="flows"):
        balance_residual(case, LoadProfile.nominal(case), sol)


def test_feasible_two_bus(case2):
    sol, rep = solve_acopf(case2, LoadProfile.nominal(case2))
    assert rep.converged
    dp, dq = balance_residual(case2, LoadProfile.nominal(case2), sol)
    assert max(np.max(np.abs(dp)), np.max(np.abs(dq))) <= 1e-6
    assert all_violations(case2, LoadProfile.nominal(case2), sol).max() <= 1e-6


def test_single_perturbations(case30):
    loads = LoadProfile.nominal(case30)
    sol, _ = solve_acopf(case30, loads)
    v = sol.v.copy()
    v[4] = case30.v_max[4] + 0.01
    viol = all_violations(case30, loads, OpfSolution.build(case30, v, sol.p_g, sol.q_g, theta=sol.theta))
    assert np.count_nonzero(viol["v_bound"] > 1e-9) == 1
    assert viol["v_bound"][4] == pytest.approx(0.01, abs=1e-12)
    pg = sol.p_g.copy()
    pg[2] = case30.p_max[2] + 0.5
    viol = all_violations(case30, loads, OpfSolution.build(case30, sol.v, pg, sol.q_g, theta=sol.theta))
    assert viol["p_bound"][2] == pytest.approx(0.5, abs=1e-12)
    assert np.count_nonzero(viol["p_bound"] > 1e-9) == 1
    assert min(np.min(a) for a in viol.values()) >= 0
