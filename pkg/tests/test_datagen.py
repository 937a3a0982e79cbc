import json

import numpy as np
import pytest

from decompopf.acopf import all_violations
from decompopf.datagen import (DatasetError, LoadSamplerConfig, generate_dataset, read_dataset,
                               sample_load_profile, scale_factors, write_dataset)
from decompopf.partition import RegionAssignment, auto_partition, induce_partition
from decompopf.training import TrainConfig, train_stage1


def test_defaults():
    cfg = LoadSamplerConfig()
    assert cfg.alpha_range == (0.875, 0.975)
    assert cfg.beta_range == (-0.025, 0.025)
    assert cfg.gamma_range == (-0.0025, 0.0025)
    assert cfg.factor_bounds == pytest.approx((0.8475, 1.0025))


def test_unordered_range_rejected():
    with pytest.raises(ValueError):
        LoadSamplerConfig(alpha_range=(1.0, 0.9))


def test_collapsed_ranges(case30):
    cfg = LoadSamplerConfig((0.9, 0.9), (0.0, 0.0), (0.0, 0.0))
    prof = sample_load_profile(case30, RegionAssignment.single(case30), cfg, 4)
    assert prof.p_d == pytest.approx(0.9 * case30.nominal_pd, rel=1e-15)
    assert prof.q_d == pytest.approx(0.9 * case30.nominal_qd, rel=1e-15)


def test_factors_in_range(case118):
    ra = auto_partition(case118, 4, seed=0)
    cfg = LoadSamplerConfig(seed=9)
    lo, hi = cfg.factor_bounds
    for d in range(200):
        f, _ = scale_factors(case118, ra, cfg, d)
        assert lo <= f.min() and f.max() <= hi


def test_same_region_shares_factor_without_gamma(toy6, toy6_assignment):
    cfg = LoadSamplerConfig(gamma_range=(0.0, 0.0), seed=1)
    f, _ = scale_factors(toy6, toy6_assignment, cfg, 0)
    region = [toy6_assignment.region_of[ld.bus] for ld in toy6.loads]
    by_region = {}
    for r, x in zip(region, f):
        by_region.setdefault(r, set()).add(float(x))
    assert all(len(s) == 1 for s in by_region.values())
    assert len(by_region) == 2


def test_fixed_power_factor(case30):
    prof = sample_load_profile(case30, RegionAssignment.single(case30), LoadSamplerConfig(seed=2), 7)
    lb = case30.load_bus
    ratio_p = prof.p_d[lb] / case30.nominal_pd[lb]
    nz = case30.nominal_qd[lb] != 0
    assert prof.q_d[lb][nz] / case30.nominal_qd[lb][nz] == pytest.approx(ratio_p[nz], rel=1e-14)


def test_minimum_T(case2):
    with pytest.raises(ValueError):
        generate_dataset(case2, RegionAssignment.single(case2), 4)


def test_split_arithmetic(case2):
    ds = generate_dataset(case2, RegionAssignment.single(case2), 10)
    assert (len(ds.train), len(ds.test)) == (8, 2)
    assert set(ds.train).isdisjoint(ds.test)
    assert sorted([*ds.train, *ds.test]) == list(range(10))


def test_all_converged(toy6_dataset):
    assert all(r["status"] == "converged" for r in toy6_dataset.reports)
    sols = toy6_dataset.solutions()
    for t in range(toy6_dataset.T):
        sol = type(sols)(v=sols.v[t], dtheta=sols.dtheta[t], p_g=sols.p_g[t], q_g=sols.q_g[t])
        assert all_violations(toy6_dataset.case, toy6_dataset.loads(t), sol).max() <= 1e-6


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "timings.json"}


@pytest.mark.slow
def test_worker_count_invariance(tmp_path, case30):
    ra = auto_partition(case30, 2, seed=0)
    a = generate_dataset(case30, ra, 12, LoadSamplerConfig(seed=5), workers=1)
    b = generate_dataset(case30, ra, 12, LoadSamplerConfig(seed=5), workers=3)
    write_dataset(a, tmp_path / "a")
    write_dataset(b, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_round_trip(tmp_path, toy6_dataset):
    write_dataset(toy6_dataset, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert back.digest == toy6_dataset.digest
    assert np.array_equal(back.train, toy6_dataset.train)
    assert np.array_equal(back.theta, toy6_dataset.theta)
    assert back.case == toy6_dataset.case
    assert back.sampler == toy6_dataset.sampler


def test_truncated_file(tmp_path, toy6_dataset):
    write_dataset(toy6_dataset, tmp_path / "d")
    f = tmp_path / "d" / "samples.ndjson"
    f.write_bytes(f.read_bytes()[:-50])
    with pytest.raises(DatasetError, match="hash"):
        read_dataset(tmp_path / "d")


def test_version_mismatch(tmp_path, toy6_dataset):
    write_dataset(toy6_dataset, tmp_path / "d")
    m = tmp_path / "d" / "manifest.json"
    doc = json.loads(m.read_text())
    doc["version"] = 999
    m.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="version"):
        read_dataset(tmp_path / "d")


def test_foreign_case_rejected(toy6_dataset, case30):
    part = induce_partition(case30, auto_partition(case30, 2, seed=0))
    with pytest.raises(DatasetError, match="case"):
        train_stage1(toy6_dataset, part, TrainConfig(epochs_lambda=1, epochs_w=1))
