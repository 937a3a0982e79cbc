"""Metric tables for OPF predictors: prediction errors, bound satisfaction,
balance violations, objective gaps and timings.

Quantiles use linear interpolation between order statistics and pool all
(sample, element) pairs. MW figures are per-unit values times base_mva.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .acopf import LoadProfile, OpfSolution, all_violations
from .netmodel import NetworkCase

__all__ = ["MetricReport", "ReportError", "quantile", "error_stats", "constant_generators", "violation_stats",
           "gap_stats", "timing_stats", "build_report", "compare_models", "emit_report", "read_report",
           "write_predictions", "read_predictions", "CSV_COLUMNS", "MW_FAMILIES"]

MW_FAMILIES = ("p_g", "q_g", "p_f", "q_f")
UNITS = {"v": "p.u.", "dtheta": "rad", "p_g": "MW", "q_g": "MVAr", "p_f": "MW", "q_f": "MVAr"}
CSV_COLUMNS = ("section", "family", "stat", "value", "unit")
METADATA = {"quantile": "linear interpolation between order statistics (inclusive)",
            "pooling": "absolute errors pooled over test samples x elements",
            "split": "test"}


class ReportError(ValueError):
    pass


def quantile(x, q: float) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ReportError("empty pool")
    return float(np.percentile(x, 100 * q, method="linear"))


def _stats(x) -> dict:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ReportError("empty pool")
    return {"avg": float(np.mean(x)), "q95": quantile(x, 0.95)}


def error_stats(preds, truths, family: str, base_mva: float = 100.0, mask=None) -> tuple[float, float]:
    """(avg, q95) of pooled absolute errors in the family's reporting unit.

    ``mask`` selects the element columns that enter the pool.
    """
    if family not in UNITS:
        raise ValueError(f"unknown family {family!r}")
    p, t = np.atleast_2d(preds), np.atleast_2d(truths)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    err = np.abs(p - t)
    if mask is not None:
        err = err[:, np.asarray(mask)]
    if family in MW_FAMILIES:
        err = err * base_mva
    s = _stats(err)
    return s["avg"], s["q95"]


def constant_generators(case: NetworkCase, p_g_train, tol: float = 1e-4) -> np.ndarray:
    """Generators sitting at the same active-power bound in every training sample."""
    p = np.atleast_2d(p_g_train)
    at_lo = np.all(np.abs(p - case.p_min) <= tol, axis=0)
    at_hi = np.all(np.abs(p - case.p_max) <= tol, axis=0)
    return at_lo | at_hi


def violation_stats(pred: OpfSolution, case: NetworkCase, loads: LoadProfile, thresholds: dict) -> dict:
    """Bound-satisfaction percentages and active-balance violation stats (MW).

    ``thresholds`` maps 'v' (p.u.), 'p_g' and 'q_g' (MW) to a positive
    scalar or per-element array; an instance counts as satisfied when its
    violation is at most the threshold.
    """
    vv = all_violations(case, loads, pred)
    kinds = {"v": ("v_bound", 1.0), "p_g": ("p_bound", case.base_mva), "q_g": ("q_bound", case.base_mva)}
    out = {"satisfaction": {}}
    for name, thr in thresholds.items():
        if name not in kinds:
            raise ValueError(f"no bound family {name!r}")
        thr = np.asarray(thr, dtype=float)
        if np.any(thr <= 0):
            raise ValueError("thresholds must be positive")
        key, scale = kinds[name]
        viol = vv[key] * scale
        out["satisfaction"][name] = float(100.0 * np.mean(viol <= thr)) if viol.size else 100.0
    out["balance"] = _stats(vv["p_balance"] * case.base_mva)
    return out


def gap_stats(cost_pred, cost_ref) -> dict:
    """Relative objective gap |pred - ref| / ref in percent."""
    cp, cr = np.asarray(cost_pred, float), np.asarray(cost_ref, float)
    if np.any(cr <= 0):
        raise ValueError("reference costs must be positive")
    return _stats(100.0 * np.abs(cp - cr) / cr)


def timing_stats(seconds) -> dict:
    return _stats(seconds)


@dataclass
class MetricReport:
    model: str
    case_hash: str
    dataset_digest: str
    n_test: int
    errors: dict = field(default_factory=dict)        # family -> {avg, q95}
    satisfaction: dict = field(default_factory=dict)  # family -> percent
    thresholds: dict = field(default_factory=dict)    # family -> description
    balance: dict = field(default_factory=dict)       # {avg, q95} MW
    gap: dict = field(default_factory=dict)           # {avg, q95} %
    timing: dict = field(default_factory=dict)        # name -> {avg, q95} s
    excluded_generators: list = field(default_factory=list)
    metadata: dict = field(default_factory=lambda: dict(METADATA))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def rows(self):
        """(section, family, stat, value, unit) in a fixed order."""
        for f in sorted(self.errors, key=_family_order):
            for stat in ("avg", "q95"):
                yield "error", f, stat, self.errors[f][stat], UNITS[f]
        for f in sorted(self.satisfaction, key=_family_order):
            yield "satisfaction", f, "percent", self.satisfaction[f], "%"
        for stat in ("avg", "q95"):
            if self.balance:
                yield "balance", "p_balance", stat, self.balance[stat], "MW"
        for stat in ("avg", "q95"):
            if self.gap:
                yield "gap", "objective", stat, self.gap[stat], "%"
        for name in sorted(self.timing):
            for stat in ("avg", "q95"):
                yield "timing", name, stat, self.timing[name][stat], "s"

    def families(self) -> list[tuple[str, str]]:
        seen = []
        for section, fam, *_ in self.rows():
            if (section, fam) not in seen:
                seen.append((section, fam))
        return seen


def _family_order(f):
    order = ("v", "dtheta", "p_g", "q_g", "p_f", "q_f")
    return order.index(f) if f in order else len(order)


def build_report(model: str, case: NetworkCase, truth: OpfSolution, pred: OpfSolution, loads: LoadProfile,
                 p_g_train, dataset_digest: str, thresholds: dict | None = None) -> MetricReport:
    """Errors and violations of ``pred`` against ``truth`` on test samples.

    ``p_g_train`` (training split) decides which generators are excluded
    from p_g statistics; default thresholds are 1e-4 p.u. for v and 1 MW for p_g.
    """
    thresholds = thresholds or {"v": 1e-4, "p_g": 1.0}
    base = case.base_mva
    const = constant_generators(case, p_g_train)
    keep = np.flatnonzero(~const)
    nb = case.n_branch
    rep = MetricReport(model=model, case_hash=case.content_hash, dataset_digest=dataset_digest,
                       n_test=int(np.atleast_2d(pred.v).shape[0]), excluded_generators=np.flatnonzero(const).tolist())
    avg, q95 = error_stats(pred.v, truth.v, "v", base)
    rep.errors["v"] = {"avg": avg, "q95": q95}
    if len(keep):
        avg, q95 = error_stats(pred.p_g, truth.p_g, "p_g", base, mask=keep)
        rep.errors["p_g"] = {"avg": avg, "q95": q95}
    if nb:
        avg, q95 = error_stats(pred.p_f[..., :nb], truth.p_f[..., :nb], "p_f", base)
        rep.errors["p_f"] = {"avg": avg, "q95": q95}
    vs = violation_stats(pred, case, loads, thresholds)
    rep.satisfaction = vs["satisfaction"]
    rep.thresholds = {k: (float(v) if np.ndim(v) == 0 else "per-element") for k, v in thresholds.items()}
    rep.balance = vs["balance"]
    return rep


def compare_models(report_o: MetricReport, report_d: MetricReport) -> dict:
    """Per-family side-by-side values, D - O deltas, O / D ratios and flags where D >= O."""
    if report_o.case_hash != report_d.case_hash:
        raise ReportError(f"reports refer to different cases ({report_o.case_hash} vs {report_d.case_hash})")
    if report_o.dataset_digest != report_d.dataset_digest:
        raise ReportError("reports refer to different datasets or splits")
    rows = {}
    for f in sorted(set(report_o.errors) & set(report_d.errors), key=_family_order):
        o, d = report_o.errors[f]["avg"], report_d.errors[f]["avg"]
        rows[f] = {"O": o, "D": d, "delta": d - o, "ratio": (o / d) if d else float("inf"), "D_not_better": d >= o}
    return rows


def comparison_markdown(rows: dict) -> str:
    lines = ["| Family | Model O avg | Model D avg | D - O | O / D |", "|---|---|---|---|---|"]
    for f, r in rows.items():
        lines.append(f"| {f} | {r['O']:.6g} | {r['D']:.6g} | {r['delta']:.6g} | {r['ratio']:.3g} |")
    return "\n".join(lines) + "\n"


def _markdown(rep: MetricReport) -> str:
    head = [f"# {rep.model}", "",
            f"case `{rep.case_hash}`, dataset `{rep.dataset_digest}`, {rep.n_test} test samples", "",
            "| Metric | Avg | 95% Quantile | Unit |", "|---|---|---|---|"]
    body = []
    for f in sorted(rep.errors, key=_family_order):
        e = rep.errors[f]
        body.append(f"| error {f} | {e['avg']:.6g} | {e['q95']:.6g} | {UNITS[f]} |")
    for f in sorted(rep.satisfaction, key=_family_order):
        body.append(f"| bounds satisfied {f} | {rep.satisfaction[f]:.4f} | - | % |")
    if rep.balance:
        body.append(f"| active balance violation | {rep.balance['avg']:.6g} | {rep.balance['q95']:.6g} | MW |")
    if rep.gap:
        body.append(f"| objective gap | {rep.gap['avg']:.6g} | {rep.gap['q95']:.6g} | % |")
    for name in sorted(rep.timing):
        t = rep.timing[name]
        body.append(f"| time {name} | {t['avg']:.6g} | {t['q95']:.6g} | s |")
    notes = ["", f"Quantiles: {rep.metadata.get('quantile')}; {rep.metadata.get('pooling')}."]
    return "\n".join(head + body + notes) + "\n"


def _csv(rep: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rep.rows():
        w.writerow([row[0], row[1], row[2], repr(float(row[3])), row[4]])
    return buf.getvalue()


def emit_report(rep: MetricReport, fmt: str, path) -> Path:
    if fmt == "json":
        text = json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = _csv(rep)
    elif fmt == "markdown":
        text = _markdown(rep)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc}") from None
    return path


def read_report(path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- prediction dumps


def write_predictions(path, ids, pred: OpfSolution, case_hash: str) -> Path:
    """One JSON record per sample: dataset id, v, dtheta, p_g, q_g (p.u.)."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(json.dumps({"case_hash": case_hash, "n": len(ids)}) + "\n")
        for r, t in enumerate(ids):
            fh.write(json.dumps({"id": int(t), "v": pred.v[r].tolist(), "dtheta": pred.dtheta[r].tolist(),
                                 "p_g": pred.p_g[r].tolist(), "q_g": pred.q_g[r].tolist()}) + "\n")
    return path


def read_predictions(path, case: NetworkCase):
    lines = Path(path).read_text().splitlines()
    head = json.loads(lines[0])
    if head.get("case_hash") != case.content_hash:
        raise ReportError(f"predictions were made for case {head.get('case_hash')}, not {case.content_hash}")
    recs = [json.loads(x) for x in lines[1:] if x]
    if len(recs) != head["n"]:
        raise ReportError(f"expected {head['n']} predictions, found {len(recs)}")
    ids = np.array([r["id"] for r in recs], dtype=np.int64)

    def col(k):
        return np.array([r[k] for r in recs], dtype=float)

    return ids, OpfSolution.build(case, col("v"), col("p_g"), col("q_g"), dtheta=col("dtheta"))
