"""Command-line harness: ``udama generate|pretrain|adapt|evaluate|experiment``.

Every subcommand reads one JSON config (``--config``); ``--seed`` and
``--out`` override the file, which overrides the built-in defaults. The
single ``seed`` drives both data generation and training.

Config layout (all keys optional)::

    {
      "seed": 0,
      "shift": {"n_source": 2000, "n_target": 200, ...},
      "train": {"lr": 0.001, "pretrain_epochs": 50, "adapt_epochs": 100,
                "batch_size": 32, "injection_fraction": 0.05, "folds": 3,
                "test_fraction": 0.3, "patience": null,
                "weights": {"alpha": 0.01, "lambda1": 0.5, "lambda2": 0.5},
                "grl_schedule": {"kind": "ramp", "value": 1.0},
                "model": {"gru_layers": 2, "hidden_size": 32, ...}},
      "methods": ["Scratch", "TF", "UDAMA"],
      "bins": 20,
      "output_dir": "runs/default"
    }
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from udama.datasynth import ShiftSpec, generate_cohorts, read_cohort, write_jsonl
from udama.errors import ConfigError, ContractViolation, DimensionError
from udama.evaluation import DEFAULT_BINS, MetricsReport, compute_metrics, hellinger, shared_histograms
from udama.losses import LossWeights
from udama.model import EncoderSpec, load_checkpoint, predict_batch, save_checkpoint
from udama.training import (
    GrlSchedule,
    Method,
    TrainConfig,
    TrainingDiverged,
    crossvalidate,
    pretrain,
    train_method,
)

log = logging.getLogger("udama.cli")

CSV_COLUMNS = ("Method", "R2", "R2_std", "Corr", "Corr_std", "MSE", "MSE_std", "MAE", "MAE_std")
DEFAULT_METHODS = ("Scratch", "TF", "UDAMA")
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


@dataclass
class ExperimentConfig:
    shift: ShiftSpec
    train: TrainConfig
    methods: list[str]
    output_dir: Path
    bins: int = DEFAULT_BINS
    seed: int = 0

    def to_dict(self) -> dict:
        """Resolved configuration without the output location."""
        train = asdict(self.train)
        return {
            "seed": self.seed,
            "shift": asdict(self.shift),
            "train": train,
            "methods": list(self.methods),
            "bins": self.bins,
        }


def _take(section: dict, cls, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return section


def build_config(doc: dict, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Resolve a config document with flag > file > default precedence."""
    doc = copy.deepcopy(doc or {})
    unknown = set(doc) - {"seed", "shift", "train", "methods", "bins", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    seed = int(seed if seed is not None else doc.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed must be nonnegative")

    shift_doc = _take(doc.get("shift", {}), ShiftSpec, "shift")
    shift = ShiftSpec(**{**shift_doc, "seed": seed})

    train_doc = dict(doc.get("train", {}))
    weights = LossWeights(**_take(train_doc.pop("weights", {}), LossWeights, "train.weights"))
    schedule = GrlSchedule(**_take(train_doc.pop("grl_schedule", {}), GrlSchedule, "train.grl_schedule"))
    model = EncoderSpec(**_take(train_doc.pop("model", {}), EncoderSpec, "train.model"))
    _take(train_doc, TrainConfig, "train")
    train_doc.pop("seed", None)
    train = TrainConfig(weights=weights, grl_schedule=schedule, model=model, seed=seed, **train_doc)

    methods = [Method.parse(m).value for m in doc.get("methods", DEFAULT_METHODS)]
    if not methods:
        raise ConfigError("methods must be non-empty")
    bins = int(doc.get("bins", DEFAULT_BINS))
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    output_dir = Path(out if out is not None else doc.get("output_dir", "runs/default"))
    return ExperimentConfig(shift, train, methods, output_dir, bins, seed)


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return build_config(doc, seed, out)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _event(name: str, **payload) -> None:
    log.info(json.dumps({"event": name, **payload}, sort_keys=True))


# ----------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    source, target = generate_cohorts(cfg.shift)
    write_jsonl(source.windows, out / "source.jsonl")
    write_jsonl(target.windows, out / "target.jsonl")
    manifest = {
        "shift": asdict(cfg.shift),
        "seed": cfg.seed,
        "files": {name: _sha256(out / name) for name in ("source.jsonl", "target.jsonl")},
        "counts": {"source": len(source), "target": len(target)},
    }
    _write_json(out / "manifest.json", manifest)
    _event("generate", **manifest["counts"])
    return out


def _data_dir(cfg: ExperimentConfig, data: str | None) -> Path:
    d = Path(data) if data else cfg.output_dir
    for name in ("source.jsonl", "target.jsonl"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} not found; run `udama generate` first or pass --data")
    return d


def cmd_pretrain(cfg: ExperimentConfig, data: str | None = None) -> Path:
    d = _data_dir(cfg, data)
    source = read_cohort(d / "source.jsonl", "source")
    params = pretrain(source, cfg.train)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "pretrained.json"
    save_checkpoint(params, path)
    _event("checkpoint", path=str(path))
    return path


def cmd_adapt(cfg: ExperimentConfig, checkpoint: str, data: str | None = None, method: str = "UDAMA") -> Path:
    """Train one method on the whole target cohort, starting from ``checkpoint``."""
    d = _data_dir(cfg, data)
    source = read_cohort(d / "source.jsonl", "source")
    target = read_cohort(d / "target.jsonl", "target")
    m = Method.parse(method)
    pretrained = load_checkpoint(checkpoint)
    params = train_method(m, source, list(target.windows), cfg.train, pretrained)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / f"{m.value}.json"
    save_checkpoint(params, path)
    _event("checkpoint", path=str(path))
    return path


def evaluate_checkpoint(checkpoint: str | Path, dataset: str | Path, bins: int = DEFAULT_BINS) -> dict:
    params = load_checkpoint(checkpoint)
    cohort = read_cohort(dataset)
    X = np.stack([w.X for w in cohort.windows])
    meta = np.stack([w.metadata for w in cohort.windows])
    y = cohort.labels
    spec = params.spec
    if X.shape[2] != spec.input_features or meta.shape[1] != spec.metadata_dim:
        raise DimensionError(
            f"checkpoint expects {spec.input_features} features and {spec.metadata_dim} metadata values; "
            f"dataset {dataset} has {X.shape[2]} and {meta.shape[1]}"
        )
    pred = predict_batch(params, X, meta)
    metrics = compute_metrics(pred, y)
    p, q, (lo, hi) = shared_histograms(pred, y, bins)
    metrics["hellinger"] = hellinger(p, q)
    report = MetricsReport.from_folds(Path(checkpoint).stem, [metrics])
    return {
        "report": report.to_dict(),
        "histogram": {
            "bins": bins,
            "range": [lo, hi],
            "edges": np.linspace(lo, hi, bins + 1).tolist(),
            "prediction": p.tolist(),
            "truth": q.tolist(),
            "hellinger": metrics["hellinger"],
        },
        "n": len(y),
    }


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str, dataset: str) -> Path:
    result = evaluate_checkpoint(checkpoint, dataset, cfg.bins)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "metrics.json"
    _write_json(path, result)
    summary = {k: v for k, v in result["report"].items() if k != "folds"}
    print(json.dumps(summary, sort_keys=True))
    return path


def results_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in sorted(reports, key=lambda r: r.method):
        writer.writerow([r.method, *(repr(v) for key in ("r2", "corr", "mse", "mae") for v in getattr(r, key))])
    return buf.getvalue()


def cmd_experiment(cfg: ExperimentConfig, data: str | None = None) -> int:
    """Run every configured method through cross-validation and write the tables.

    Returns the process exit code: 0 on success, 1 if any method failed (the
    results written so far are kept and flagged as partial).
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if data:
        d = _data_dir(cfg, data)
        source, target = read_cohort(d / "source.jsonl", "source"), read_cohort(d / "target.jsonl", "target")
    else:
        source, target = generate_cohorts(cfg.shift)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    reports, failure, stage = [], None, "pretrain"
    try:
        pretrained = None
        if any(Method.parse(m) is not Method.SCRATCH for m in cfg.methods):
            pretrained = pretrain(source, cfg.train)
            save_checkpoint(pretrained, ckpt / "pretrained.json")
        for stage in sorted(cfg.methods):
            report, _ = crossvalidate(target, source, cfg.train, stage, pretrained, cfg.bins, ckpt)
            reports.append(report)
            _event("method", method=stage, corr=report.corr[0], mse=report.mse[0],
                   hellinger=report.hellinger[0])
    except (TrainingDiverged, ContractViolation) as exc:
        failure = {"method": stage, "error": str(exc)}
        log.error(json.dumps({"event": "failed", **failure}))

    doc = {
        "config": cfg.to_dict(),
        "status": "failed" if failure else "ok",
        "partial": failure is not None,
        "failure": failure,
        "results": [r.to_dict() for r in sorted(reports, key=lambda r: r.method)],
    }
    _write_json(out / "results.json", doc)
    (out / "results.csv").write_text(results_csv(reports))
    return 1 if failure else 0


# ----------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udama", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        return p

    add("generate", "write synthetic source/target cohorts and a manifest")
    p = add("pretrain", "supervised pre-training on the source cohort")
    p.add_argument("--data", help="directory with source.jsonl (default: --out)")
    p = add("adapt", "train a method on the full target cohort from a checkpoint")
    p.add_argument("--data", help="directory with source.jsonl and target.jsonl (default: --out)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="UDAMA")
    p = add("evaluate", "metrics and prediction/truth histograms of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="JSON-lines dataset")
    p = add("experiment", "cross-validate every configured method and write results tables")
    p.add_argument("--data", help="reuse datasets from this directory instead of generating")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("UDAMA_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"UDAMA_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    root = logging.getLogger("udama")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(LOG_LEVELS[level])
    root.propagate = False


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.data)
        elif args.command == "adapt":
            cmd_adapt(cfg, args.checkpoint, args.data, args.method)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.dataset)
        else:
            return cmd_experiment(cfg, args.data)
    except ConfigError as exc:
        print(f"udama: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, DimensionError, ContractViolation, TrainingDiverged) as exc:
        print(f"udama: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
