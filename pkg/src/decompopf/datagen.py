"""Correlated regional load sampling and labelled AC-OPF datasets.

A load ``l`` in region ``k`` is scaled by ``alpha + beta[k] + gamma[l]``
(system level, regional offset, individual noise), active and reactive
alike. Every draw has its own RNG stream keyed by ``(seed, draw_index)``,
so a dataset does not depend on how draws are spread over workers.

On disk a dataset is a directory::

    manifest.json    version, hashes, sampler config, split, base_mva
    samples.ndjson   one JSON record per sample (per-unit values)
    case.json        the network, native format
    timings.json     solver wall times (excluded from hashes)
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .acopf import LoadProfile, OpfSolution
from .netmodel import NetworkCase, parse_case, to_json
from .partition import RegionAssignment
from .solver import SolveOptions, solve_acopf

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

__all__ = ["LoadSamplerConfig", "Dataset", "DatasetError", "GenerationError", "sample_load_profile",
           "generate_dataset", "write_dataset", "read_dataset"]


class DatasetError(RuntimeError):
    pass


class GenerationError(DatasetError):
    """Too many AC-OPF solves failed while sampling."""


@dataclass(frozen=True)
class LoadSamplerConfig:
    alpha_range: tuple[float, float] = (0.875, 0.975)
    beta_range: tuple[float, float] = (-0.025, 0.025)
    gamma_range: tuple[float, float] = (-0.0025, 0.0025)
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha_range", "beta_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be an ordered pair")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @property
    def factor_bounds(self) -> tuple[float, float]:
        return (self.alpha_range[0] + self.beta_range[0] + self.gamma_range[0],
                self.alpha_range[1] + self.beta_range[1] + self.gamma_range[1])


def _uniform(rng, bounds, size=None):
    lo, hi = bounds
    return rng.uniform(lo, hi, size) if hi > lo else (np.full(size, lo) if size is not None else lo)


def scale_factors(case: NetworkCase, assignment: RegionAssignment, cfg: LoadSamplerConfig, draw: int):
    """Per-load scale factors and the draw's alpha."""
    rng = np.random.default_rng([cfg.seed, draw])
    alpha = _uniform(rng, cfg.alpha_range)
    beta = _uniform(rng, cfg.beta_range, assignment.K)
    gamma = _uniform(rng, cfg.gamma_range, case.n_load)
    regions = np.array([assignment.region_of[ld.bus] for ld in case.loads], dtype=np.int64)
    return alpha + beta[regions] + gamma, alpha


def sample_load_profile(case: NetworkCase, assignment: RegionAssignment, cfg: LoadSamplerConfig,
                        draw: int) -> LoadProfile:
    missing = [ld.bus for ld in case.loads if ld.bus not in assignment.region_of]
    if missing:
        raise ValueError(f"load buses without a region: {missing[:10]}")
    factors, _ = scale_factors(case, assignment, cfg, draw)
    p_d = np.zeros(case.n_bus)
    q_d = np.zeros(case.n_bus)
    p_d[case.load_bus] = factors * np.array([ld.p_nom for ld in case.loads])
    q_d[case.load_bus] = factors * np.array([ld.q_nom for ld in case.loads])
    return LoadProfile(p_d, q_d)


# --------------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    case: NetworkCase
    assignment_hash: str
    sampler: LoadSamplerConfig
    draws: np.ndarray
    p_d: np.ndarray
    q_d: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray
    reports: list[dict]
    train: np.ndarray
    test: np.ndarray
    wall_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def T(self) -> int:
        return len(self.draws)

    @property
    def case_hash(self) -> str:
        return self.case.content_hash

    @property
    def dtheta(self) -> np.ndarray:
        return self.theta[:, self.case.branch_from] - self.theta[:, self.case.branch_to]

    def loads(self, idx=None) -> LoadProfile:
        idx = slice(None) if idx is None else idx
        return LoadProfile(self.p_d[idx], self.q_d[idx])

    def solutions(self, idx=None) -> OpfSolution:
        idx = slice(None) if idx is None else idx
        return OpfSolution.build(self.case, self.v[idx], self.p_g[idx], self.q_g[idx], theta=self.theta[idx])

    def load_features(self, idx=None) -> np.ndarray:
        """(T, 2|L|) model input: active then reactive demand at load buses."""
        idx = slice(None) if idx is None else idx
        lb = self.case.load_bus
        return np.concatenate([self.p_d[idx][:, lb], self.q_d[idx][:, lb]], axis=1)

    def check_case(self, case: NetworkCase) -> None:
        if case.content_hash != self.case_hash:
            raise DatasetError(f"dataset was built for case {self.case_hash}, got {case.content_hash}")

    def records(self):
        for t in range(self.T):
            rep = self.reports[t]
            yield {"id": t, "draw": int(self.draws[t]),
                   "p_d": self.p_d[t].tolist(), "q_d": self.q_d[t].tolist(),
                   "v": self.v[t].tolist(), "theta": self.theta[t].tolist(),
                   "p_g": self.p_g[t].tolist(), "q_g": self.q_g[t].tolist(),
                   "status": rep["status"], "iterations": rep["iterations"],
                   "final_feas": rep["final_feas"], "objective": rep["objective"]}

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for rec in self.records():
            h.update((json.dumps(rec) + "\n").encode())
        return h.hexdigest()[:16]


def _split(T: int, seed: int):
    order = np.random.default_rng([seed, 0x5EED]).permutation(T)
    n_train = int(round(0.8 * T))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _solve_draw(args):
    case, assignment, cfg, opts, draw = args
    loads = sample_load_profile(case, assignment, cfg, draw)
    sol, rep = solve_acopf(case, loads, opts)
    return draw, loads, sol, rep


def generate_dataset(case: NetworkCase, assignment: RegionAssignment, T: int,
                     sampler_cfg: LoadSamplerConfig | None = None, solve_options: SolveOptions | None = None,
                     workers: int = 1) -> Dataset:
    """Exactly T converged samples; failed draws are skipped and counted.

    Draws are attempted in index order in windows; a window in which more
    than half the draws fail aborts the run.
    """
    if T < 5:
        raise ValueError("need T >= 5 samples")
    cfg = sampler_cfg or LoadSamplerConfig()
    opts = solve_options or SolveOptions()
    kept = []
    next_draw = 0
    failures = 0
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while len(kept) < T:
            window = max(T - len(kept), 10)
            jobs = [(case, assignment, cfg, opts, d) for d in range(next_draw, next_draw + window)]
            next_draw += window
            results = pool.map(_solve_draw, jobs, chunksize=max(1, window // (4 * workers))) if pool \
                else map(_solve_draw, jobs)
            bad = 0
            for draw, loads, sol, rep in results:
                if rep.converged:
                    kept.append((draw, loads, sol, rep))
                else:
                    bad += 1
            failures += bad
            if bad > 0.5 * window:
                raise GenerationError(f"{bad} of {window} AC-OPF solves failed in draws "
                                   f"[{next_draw - window}, {next_draw}); aborting")
    finally:
        if pool:
            pool.shutdown()
    kept = kept[:T]
    if failures:
        log.info("dataset generation: %d failed draws skipped", failures)
    train, test = _split(T, cfg.seed)
    return Dataset(
        case=case, assignment_hash=assignment.digest, sampler=cfg,
        draws=np.array([k[0] for k in kept], dtype=np.int64),
        p_d=np.stack([k[1].p_d for k in kept]), q_d=np.stack([k[1].q_d for k in kept]),
        v=np.stack([k[2].v for k in kept]), theta=np.stack([k[2].theta for k in kept]),
        p_g=np.stack([k[2].p_g for k in kept]), q_g=np.stack([k[2].q_g for k in kept]),
        reports=[k[3].to_dict() for k in kept], train=train, test=test,
        wall_times=np.array([k[3].wall_time for k in kept]))


# --------------------------------------------------------------------------- persistence


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    body = "".join(json.dumps(rec) + "\n" for rec in ds.records()).encode()
    (path / "samples.ndjson").write_bytes(body)
    (path / "case.json").write_text(to_json(ds.case) + "\n")
    manifest = {
        "version": FORMAT_VERSION,
        "case_name": ds.case.name,
        "case_hash": ds.case_hash,
        "partition_hash": ds.assignment_hash,
        "base_mva": ds.case.base_mva,
        "sampler": asdict(ds.sampler),
        "T": ds.T,
        "split": {"train": ds.train.tolist(), "test": ds.test.tolist()},
        "samples_sha256": hashlib.sha256(body).hexdigest(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (path / "timings.json").write_text(json.dumps({"wall_time": ds.wall_times.tolist()}) + "\n")
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        body = (path / "samples.ndjson").read_bytes()
        case = parse_case((path / "case.json").read_text(), name=manifest.get("case_name", "case"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable dataset at {path}: {exc}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"dataset format version {manifest.get('version')} != {FORMAT_VERSION}")
    if hashlib.sha256(body).hexdigest() != manifest["samples_sha256"]:
        raise DatasetError("samples.ndjson does not match the manifest hash (truncated or modified)")
    if case.content_hash != manifest["case_hash"]:
        raise DatasetError("case.json does not match the manifest case hash")
    recs = [json.loads(line) for line in body.decode().splitlines() if line]
    if len(recs) != manifest["T"]:
        raise DatasetError(f"expected {manifest['T']} samples, found {len(recs)}")
    s = manifest["sampler"]
    cfg = LoadSamplerConfig(tuple(s["alpha_range"]), tuple(s["beta_range"]), tuple(s["gamma_range"]), s["seed"])
    keys = ("status", "iterations", "final_feas", "objective")
    try:
        wall = np.array(json.loads((path / "timings.json").read_text())["wall_time"])
    except (OSError, json.JSONDecodeError, KeyError):
        wall = np.zeros(0)

    def col(key):
        return np.array([r[key] for r in recs], dtype=float)

    return Dataset(
        case=case, assignment_hash=manifest["partition_hash"], sampler=cfg,
        draws=np.array([r["draw"] for r in recs], dtype=np.int64),
        p_d=col("p_d"), q_d=col("q_d"), v=col("v"), theta=col("theta"), p_g=col("p_g"), q_g=col("q_g"),
        reports=[{k: r[k] for k in keys} | {"distance": None} for r in recs],
        train=np.array(manifest["split"]["train"], dtype=np.int64),
        test=np.array(manifest["split"]["test"], dtype=np.int64), wall_times=wall)
