import csv
import json

import numpy as np
import pytest

from decompopf.acopf import LoadProfile, OpfSolution, balance_residual
from decompopf.evaluation import (CSV_COLUMNS, MetricReport, ReportError, build_report, compare_models,
                                  constant_generators, emit_report, error_stats, quantile, read_predictions,
                                  read_report, violation_stats, write_predictions)


def sorted_quantile(x, q):
    """Inclusive linear interpolation between order statistics."""
    s = sorted(x)
    pos = q * (len(s) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def test_quantile_against_sort(rng):
    for n in (1, 2, 7, 100, 1001):
        x = rng.exponential(size=n)
        for q in (0.0, 0.5, 0.95, 1.0):
            assert quantile(x, q) == pytest.approx(sorted_quantile(x, q), abs=1e-12)


def test_quantile_pooled_example():
    errors = np.array([1.0] * 95 + [10.0] * 5).reshape(10, 10)
    avg, q95 = error_stats(errors, np.zeros_like(errors), "v")
    assert q95 == pytest.approx(1.45, abs=1e-12)
    assert avg == pytest.approx(1.45, abs=1e-12)


def test_error_stats_identity(rng):
    x = rng.normal(size=(5, 4))
    assert error_stats(x, x, "p_g") == (0.0, 0.0)


def test_mw_conversion():
    avg, q95 = error_stats([[0.51]], [[0.50]], "p_g", base_mva=100.0)
    assert avg == pytest.approx(1.0) and q95 == pytest.approx(1.0)
    assert error_stats([[0.51]], [[0.50]], "v", base_mva=100.0)[0] == pytest.approx(0.01)


def test_empty_pool():
    with pytest.raises(ReportError):
        error_stats(np.zeros((3, 2)), np.zeros((3, 2)), "p_g", mask=np.zeros(0, np.int64))


def test_constant_generator_exclusion(toy6):
    p = np.array([[0.0], [0.0], [0.0]])
    assert constant_generators(toy6, p).tolist() == [True]
    assert constant_generators(toy6, np.array([[0.0], [1.0]])).tolist() == [False]


def _truth(ds, idx):
    return ds.solutions(idx)


def test_feasible_full_satisfaction(toy6_dataset):
    idx = toy6_dataset.test
    st = violation_stats(_truth(toy6_dataset, idx), toy6_dataset.case, toy6_dataset.loads(idx),
                         {"v": 1e-4, "p_g": 1.0})
    assert st["satisfaction"] == {"v": 100.0, "p_g": 100.0}
    assert st["balance"]["avg"] <= 1e-4


def test_one_percent_violating(toy6):
    pg = np.full((100, 1), (toy6.p_min[0] + toy6.p_max[0]) / 2)
    pg[37, 0] = toy6.p_max[0] + 0.02  # 2 MW over
    pred = OpfSolution.build(toy6, np.ones((100, 6)), pg, np.zeros((100, 1)), dtheta=np.zeros((100, 7)))
    loads = LoadProfile(np.tile(toy6.nominal_pd, (100, 1)), np.tile(toy6.nominal_qd, (100, 1)))
    assert violation_stats(pred, toy6, loads, {"p_g": 1.0})["satisfaction"]["p_g"] == 99.0
    assert violation_stats(pred, toy6, loads, {"p_g": 2.5})["satisfaction"]["p_g"] == 100.0


def test_balance_matches_residual(toy6_dataset, rng):
    case = toy6_dataset.case
    idx = toy6_dataset.test
    t = _truth(toy6_dataset, idx)
    pred = OpfSolution.build(case, t.v + rng.normal(0, 0.01, t.v.shape), t.p_g, t.q_g,
                             dtheta=t.dtheta + rng.normal(0, 0.01, t.dtheta.shape))
    st = violation_stats(pred, case, toy6_dataset.loads(idx), {"v": 1e-4})
    dp, _ = balance_residual(case, toy6_dataset.loads(idx), pred)
    pool = np.abs(dp).ravel() * case.base_mva
    assert st["balance"]["avg"] == pytest.approx(pool.mean(), abs=1e-9)
    assert st["balance"]["q95"] == pytest.approx(sorted_quantile(pool, 0.95), abs=1e-9)


def test_thresholds_positive(toy6_dataset):
    idx = toy6_dataset.test
    with pytest.raises(ValueError):
        violation_stats(_truth(toy6_dataset, idx), toy6_dataset.case, toy6_dataset.loads(idx), {"v": 0.0})


@pytest.fixture
def report(toy6_dataset, rng):
    ds = toy6_dataset
    t = _truth(ds, ds.test)
    pred = OpfSolution.build(ds.case, t.v + 0.001, t.p_g + rng.normal(0, 0.01, t.p_g.shape), t.q_g,
                             dtheta=t.dtheta)
    return build_report("O", ds.case, t, pred, ds.loads(ds.test), ds.p_g[ds.train], ds.digest)


def test_report_contents(report, toy6_dataset):
    assert report.n_test == len(toy6_dataset.test)
    assert report.errors["v"]["avg"] == pytest.approx(0.001)
    assert set(report.errors) == {"v", "p_g", "p_f"}
    assert report.errors["p_f"]["avg"] > 0
    assert report.metadata["quantile"].startswith("linear")


def test_compare_identical(report):
    rows = compare_models(report, report)
    assert all(r["delta"] == 0 for r in rows.values())
    assert all(r["D_not_better"] for r in rows.values())


def test_compare_ratio(report):
    o = MetricReport.from_dict(json.loads(json.dumps(report.to_dict())))
    d = MetricReport.from_dict(json.loads(json.dumps(report.to_dict())))
    o.errors["p_g"] = {"avg": 8.41, "q95": 20.0}
    d.errors["p_g"] = {"avg": 0.84, "q95": 2.0}
    r = compare_models(o, d)["p_g"]
    assert round(r["ratio"], 1) == 10.0
    assert not r["D_not_better"]


def test_compare_rejects_other_case(report):
    other = MetricReport.from_dict({**report.to_dict(), "case_hash": "deadbeef"})
    with pytest.raises(ReportError):
        compare_models(report, other)


def test_json_round_trip(tmp_path, report):
    emit_report(report, "json", tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == report


def test_csv_columns(tmp_path, report):
    emit_report(report, "csv", tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [tuple(r[:3]) for r in rows[1:3]] == [("error", "v", "avg"), ("error", "v", "q95")]


def test_markdown_rows(tmp_path, report):
    emit_report(report, "markdown", tmp_path / "r.md")
    table = [l for l in (tmp_path / "r.md").read_text().splitlines() if l.startswith("| ") and "---" not in l]
    assert len(table) - 1 == len(report.families())


def test_emit_deterministic(tmp_path, report):
    for fmt in ("json", "csv", "markdown"):
        a = emit_report(report, fmt, tmp_path / f"a.{fmt}").read_bytes()
        b = emit_report(report, fmt, tmp_path / f"b.{fmt}").read_bytes()
        assert a == b


def test_unwritable(tmp_path, report):
    with pytest.raises(ReportError):
        emit_report(report, "json", tmp_path / "missing" / "r.json")


def test_prediction_dump_reproduces_report(tmp_path, report, toy6_dataset, rng):
    ds = toy6_dataset
    t = _truth(ds, ds.test)
    pred = OpfSolution.build(ds.case, t.v * 1.001, t.p_g + 0.002, t.q_g, dtheta=t.dtheta * 0.99)
    write_predictions(tmp_path / "p.ndjson", ds.test, pred, ds.case.content_hash)
    ids, back = read_predictions(tmp_path / "p.ndjson", ds.case)
    assert np.array_equal(ids, ds.test)
    a = build_report("D", ds.case, t, pred, ds.loads(ds.test), ds.p_g[ds.train], ds.digest)
    b = build_report("D", ds.case, t, back, ds.loads(ds.test), ds.p_g[ds.train], ds.digest)
    assert a == b


def test_prediction_dump_case_guard(tmp_path, toy6_dataset, case30):
    ds = toy6_dataset
    write_predictions(tmp_path / "p.ndjson", ds.test, _truth(ds, ds.test), ds.case.content_hash)
    with pytest.raises(ReportError):
        read_predictions(tmp_path / "p.ndjson", case30)
