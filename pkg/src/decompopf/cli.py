"""Command-line pipeline: partition, gen-data, train-stage1, train-stage2,
train-direct, predict, loadflow, evaluate.

Every command works inside a run directory. Inputs default to where the
previous command wrote its outputs, so a pipeline is a sequence of calls
with the same ``--run-dir``. Settings come from ``--config file.json``
(keys are the flag names with dashes replaced by underscores) and are
overridden by flags. The resolved settings are echoed to ``run.json``.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 training abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .acopf import LoadProfile, OpfSolution
from .datagen import DatasetError, GenerationError, LoadSamplerConfig, generate_dataset, read_dataset, write_dataset
from .evaluation import ReportError, build_report, compare_models, comparison_markdown, emit_report, \
    gap_stats, read_predictions, read_report, timing_stats, write_predictions
from .netmodel import CaseError, builtin_case, load_case
from .neural import NeuralError
from .partition import PartitionError, RegionAssignment, auto_partition, induce_partition, partition_stats, \
    read_assignment, write_assignment
from .solver import SolveOptions, SolverError, objective_gap, solve_loadflow
from .training import TrainConfig, TrainingAbort, assemble_prediction, load_model, predict_direct, save_model, \
    train_direct, train_stage1, train_stage2, write_log

log = logging.getLogger("decompopf")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_TRAIN = 0, 2, 3, 4


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    run_dir: str = "run"
    seed: int | None = None
    case: str | None = None
    partition: str | None = None
    dataset: str | None = None
    models: str | None = None
    reports: str | None = None
    workers: int = 1
    # partition
    K: int | None = None
    from_hints: bool = False
    # sampling and solving
    T: int = 200
    alpha_range: tuple = (0.875, 0.975)
    beta_range: tuple = (-0.025, 0.025)
    gamma_range: tuple = (-0.0025, 0.0025)
    tol_feas: float = 1e-8
    tol_opt: float = 1e-6
    max_iter: int = 200
    # training
    epochs_lambda: int = 10
    epochs_w: int = 50
    batch_size: int = 120
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    rho: float = 1e-3
    budget: float | None = None
    norm: str = "l1"
    holdout_fraction: float = 0.1
    # prediction / evaluation
    model: str = "D"
    split: str = "test"
    formats: tuple = ("json", "csv", "markdown")
    compare: str | None = None
    timing: bool = False

    def root(self) -> Path:
        return Path(self.run_dir)

    def path(self, name: str, default: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else self.root() / default

    def train_config(self, budget_scale: float = 1.0) -> TrainConfig:
        return TrainConfig(epochs_lambda=self.epochs_lambda, epochs_w=self.epochs_w, batch_size=self.batch_size,
                           lr_start=self.lr_start, lr_end=self.lr_end, rho=self.rho, seed=self.seed,
                           wall_clock_budget=self.budget * budget_scale if self.budget else None,
                           norm=self.norm, holdout_fraction=self.holdout_fraction)

    def solve_options(self) -> SolveOptions:
        return SolveOptions(tol_feas=self.tol_feas, tol_opt=self.tol_opt, max_iter=self.max_iter, seed=self.seed)

    def sampler(self) -> LoadSamplerConfig:
        return LoadSamplerConfig(tuple(self.alpha_range), tuple(self.beta_range), tuple(self.gamma_range),
                                 seed=self.seed)


HELP = {
    "run_dir": "directory holding every artifact of the run (default: run)",
    "seed": "random seed (required)",
    "case": "case file (MATPOWER .m or JSON) or bundled case name",
    "partition": "region assignment JSON (default: RUN/partition.json)",
    "dataset": "dataset directory (default: RUN/dataset)",
    "models": "model directory (default: RUN/models)",
    "reports": "report directory (default: RUN/reports)",
    "workers": "worker processes for data generation and stage-2 training",
    "K": "number of regions for automatic partitioning",
    "from_hints": "use the case's area column as the region assignment",
    "T": "number of samples",
    "alpha_range": "system-wide load scale range",
    "beta_range": "per-region load offset range",
    "gamma_range": "per-load noise range",
    "tol_feas": "solver feasibility tolerance (p.u.)",
    "tol_opt": "solver optimality tolerance",
    "max_iter": "solver iteration cap",
    "epochs_lambda": "dual (multiplier) epochs",
    "epochs_w": "weight epochs per dual epoch",
    "batch_size": "mini-batch size",
    "lr_start": "initial learning rate",
    "lr_end": "final learning rate",
    "rho": "dual step size",
    "budget": "wall-clock seconds per model; stage 1 gets 1/3, each region 2/3 (regions are parallel jobs)",
    "norm": "prediction-error norm in the loss (l1 or l2)",
    "holdout_fraction": "fraction of training samples held out for logging and checkpoint selection",
    "model": "D (two-stage) or O (direct)",
    "split": "dataset split to predict on (test or train)",
    "formats": "report formats",
    "compare": "report JSON of another model to compare against",
    "timing": "include load-flow wall times in the report (not byte-reproducible)",
}

COMMANDS = {
    "partition": ("case", "partition", "K", "from_hints"),
    "gen-data": ("case", "partition", "dataset", "workers", "T", "alpha_range", "beta_range", "gamma_range",
                 "tol_feas", "tol_opt", "max_iter"),
    "train-stage1": ("dataset", "partition", "models", "epochs_lambda", "epochs_w", "batch_size", "lr_start",
                     "lr_end", "rho", "budget", "norm", "holdout_fraction"),
    "train-stage2": ("dataset", "partition", "models", "workers", "epochs_lambda", "epochs_w", "batch_size",
                     "lr_start", "lr_end", "rho", "budget", "norm", "holdout_fraction"),
    "train-direct": ("dataset", "models", "epochs_lambda", "epochs_w", "batch_size", "lr_start", "lr_end", "rho",
                     "budget", "norm", "holdout_fraction"),
    "predict": ("dataset", "partition", "models", "model", "split"),
    "loadflow": ("dataset", "model", "tol_feas", "tol_opt", "max_iter"),
    "evaluate": ("dataset", "reports", "model", "formats", "compare", "timing"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _add_flag(p: argparse.ArgumentParser, name: str):
    flag = "--" + name.replace("_", "-")
    kind = _FIELD_TYPES[name]
    kw = {"dest": name, "default": argparse.SUPPRESS, "help": HELP[name]}
    if kind == "bool":
        p.add_argument(flag, action="store_true", **kw)
    elif kind == "tuple" and name.endswith("_range"):
        p.add_argument(flag, nargs=2, type=float, metavar=("LO", "HI"), **kw)
    elif name == "formats":
        p.add_argument(flag, nargs="+", choices=("json", "csv", "markdown"), **kw)
    elif name == "norm":
        p.add_argument(flag, choices=("l1", "l2"), **kw)
    elif name == "model":
        p.add_argument(flag, choices=("D", "O"), **kw)
    elif name == "split":
        p.add_argument(flag, choices=("test", "train"), **kw)
    else:
        conv = {"int | None": int, "int": int, "float": float, "float | None": float}.get(kind, str)
        p.add_argument(flag, type=conv, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decompopf", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, names in COMMANDS.items():
        p = sub.add_parser(cmd, help=f"{cmd} step")
        p.add_argument("--config", help="JSON file with settings; flags override it")
        for name in ("run_dir", "seed") + names:
            _add_flag(p, name)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    known = set(_FIELD_TYPES)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update({k: v for k, v in vars(args).items() if k in known})
    cfg = RunConfig(**values)
    if cfg.seed is None:
        raise ConfigError("a seed is required (--seed or 'seed' in the config file)")
    for name in ("alpha_range", "beta_range", "gamma_range", "formats"):
        setattr(cfg, name, tuple(getattr(cfg, name)))
    return cfg


def _echo(cfg: RunConfig, command: str):
    root = cfg.root()
    root.mkdir(parents=True, exist_ok=True)
    path = root / "run.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc[command] = {k: v for k, v in asdict(cfg).items() if k in ("run_dir", "seed") + COMMANDS[command]}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found at {path}")
    return path


def _case(cfg: RunConfig):
    if not cfg.case:
        raise ConfigError("--case is required")
    p = Path(cfg.case)
    if p.exists():
        return load_case(p)
    try:
        return builtin_case(cfg.case)
    except FileNotFoundError:
        raise ConfigError(f"case {cfg.case!r} is neither a file nor a bundled case") from None


# --------------------------------------------------------------------------- commands


def cmd_partition(cfg: RunConfig) -> int:
    case = _case(cfg)
    if cfg.from_hints:
        asg = RegionAssignment.from_hints(case)
    elif cfg.K:
        asg = auto_partition(case, cfg.K, seed=cfg.seed)
    else:
        raise ConfigError("give --K or --from-hints")
    part = induce_partition(case, asg)
    out = cfg.path("partition", "partition.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_assignment(asg, out)
    print(json.dumps(partition_stats(part)))
    return EXIT_OK


def _assignment(cfg: RunConfig, case):
    path = cfg.path("partition", "partition.json")
    if path.exists():
        return read_assignment(path)
    if cfg.partition:
        raise ConfigError(f"partition not found at {path}")
    return RegionAssignment.single(case)


def cmd_gen_data(cfg: RunConfig) -> int:
    case = _case(cfg)
    asg = _assignment(cfg, case)
    induce_partition(case, asg)
    ds = generate_dataset(case, asg, cfg.T, cfg.sampler(), cfg.solve_options(), workers=cfg.workers)
    write_dataset(ds, cfg.path("dataset", "dataset"))
    print(json.dumps({"T": ds.T, "train": len(ds.train), "test": len(ds.test), "digest": ds.digest}))
    return EXIT_OK


def _dataset(cfg: RunConfig):
    return read_dataset(_need(cfg.path("dataset", "dataset"), "dataset"))


def _partition(cfg: RunConfig, ds):
    asg = read_assignment(_need(cfg.path("partition", "partition.json"), "partition"))
    if asg.digest != ds.assignment_hash:
        log.warning("partition differs from the one used to sample the dataset")
    return induce_partition(ds.case, asg)


def cmd_train_stage1(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    part = _partition(cfg, ds)
    model, rows = train_stage1(ds, part, cfg.train_config(1 / 3))
    out = cfg.path("models", "models")
    save_model(model, out / "stage1")
    write_log(rows, out / "stage1" / "log.csv")
    return EXIT_OK


def cmd_train_stage2(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    part = _partition(cfg, ds)
    out = cfg.path("models", "models")
    s1 = load_model(_need(out / "stage1", "stage-1 model")) if part.K > 1 else None
    models, rows = train_stage2(ds, part, s1, cfg.train_config(2 / 3), workers=cfg.workers)
    for m in models:
        save_model(m, out / "stage2" / f"region_{m.region}")
    write_log(rows, out / "stage2" / "log.csv")
    return EXIT_OK


def cmd_train_direct(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    model, rows = train_direct(ds, cfg.train_config())
    out = cfg.path("models", "models") / "direct"
    save_model(model, out)
    write_log(rows, out / "log.csv")
    return EXIT_OK


def _split_idx(cfg, ds):
    return ds.test if cfg.split == "test" else ds.train


def _pred_path(cfg: RunConfig) -> Path:
    return cfg.root() / "predictions" / f"{cfg.model}_{cfg.split}.ndjson"


def cmd_predict(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    idx = _split_idx(cfg, ds)
    out = cfg.path("models", "models")
    loads = ds.loads(idx)
    if cfg.model == "O":
        model = load_model(_need(out / "direct", "direct model"))
        pred = predict_direct(model, loads, ds.case)
    else:
        part = _partition(cfg, ds)
        s1 = load_model(_need(out / "stage1", "stage-1 model")) if part.K > 1 else None
        regional = [load_model(_need(out / "stage2" / f"region_{k}", f"region {k} model")) for k in range(part.K)]
        pred = assemble_prediction(s1, regional, loads, ds.case, part)
    path = _pred_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(path, idx, pred.solution(), ds.case_hash)
    return EXIT_OK


def cmd_loadflow(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    ids, pred = read_predictions(_need(_pred_path(cfg), "predictions"), ds.case)
    opts = cfg.solve_options()
    records, times, cold = [], [], []
    for r, t in enumerate(ids):
        loads = LoadProfile(ds.p_d[t], ds.q_d[t])
        one = OpfSolution(v=pred.v[r], dtheta=pred.dtheta[r], p_g=pred.p_g[r], q_g=pred.q_g[r])
        _, rep = solve_loadflow(ds.case, loads, one, opts)
        ref = ds.reports[t]["objective"]
        records.append({"id": int(t), "status": rep.status, "iterations": rep.iterations,
                        "objective": rep.objective, "reference_objective": ref,
                        "gap_percent": objective_gap(rep.objective, ref) if rep.converged else None})
        times.append(rep.wall_time)
        if ds.wall_times.size:
            cold.append(float(ds.wall_times[t]))
    ok = [r for r in records if r["gap_percent"] is not None]
    summary = {"n": len(records), "converged": len(ok),
               "gap": gap_stats([r["objective"] for r in ok], [r["reference_objective"] for r in ok]) if ok else None}
    out = cfg.root() / "loadflow"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{cfg.model}.json").write_text(json.dumps({"summary": summary, "instances": records}, indent=1) + "\n")
    timing = {"restoration": timing_stats(times)}
    if cold:
        timing["cold_acopf"] = timing_stats(cold)
    (out / f"{cfg.model}_timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    print(json.dumps({"converged": f"{len(ok)}/{len(records)}", "gap": summary["gap"], "timing": timing}))
    if not ok:
        raise SolverError("no load-flow restoration converged")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    ids, pred = read_predictions(_need(_pred_path(cfg), "predictions"), ds.case)
    truth = ds.solutions(ids)
    rep = build_report(cfg.model, ds.case, truth, pred, ds.loads(ids), ds.p_g[ds.train],
                       dataset_digest=f"{ds.digest}:{cfg.split}")
    lf = cfg.root() / "loadflow" / f"{cfg.model}.json"
    if lf.exists():
        summary = json.loads(lf.read_text())["summary"]
        if summary.get("gap"):
            rep.gap = summary["gap"]
    if cfg.timing:
        tp = cfg.root() / "loadflow" / f"{cfg.model}_timing.json"
        if tp.exists():
            rep.timing = json.loads(tp.read_text())
    out = cfg.path("reports", "reports")
    out.mkdir(parents=True, exist_ok=True)
    ext = {"json": "json", "csv": "csv", "markdown": "md"}
    for fmt in cfg.formats:
        emit_report(rep, fmt, out / f"{cfg.model}.{ext[fmt]}")
    if cfg.compare:
        other = read_report(_need(Path(cfg.compare), "comparison report"))
        o, d = (other, rep) if cfg.model == "D" else (rep, other)
        rows = compare_models(o, d)
        (out / "comparison.md").write_text(comparison_markdown(rows))
        (out / "comparison.json").write_text(json.dumps(rows, indent=1) + "\n")
    return EXIT_OK


HANDLERS = {"partition": cmd_partition, "gen-data": cmd_gen_data, "train-stage1": cmd_train_stage1,
            "train-stage2": cmd_train_stage2, "train-direct": cmd_train_direct, "predict": cmd_predict,
            "loadflow": cmd_loadflow, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        _echo(cfg, args.command)
        code = HANDLERS[args.command](cfg)
    except GenerationError as exc:
        print(f"decompopf {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, CaseError, PartitionError, DatasetError, ReportError, FileNotFoundError,
            ValueError, TypeError) as exc:
        print(f"decompopf {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"decompopf {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (TrainingAbort, NeuralError) as exc:
        print(f"decompopf {args.command}: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
