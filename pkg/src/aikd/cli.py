"""Command-line entry point: pretrain, distill, eval, aggregate, divergence-demo.

Runs are driven by a JSON config document with ``model``, ``train``,
``augment``, ``dataset`` and ``metrics`` sections; unknown keys anywhere are
rejected with their full path. Every command writes the fully-resolved
document to ``<out>/config.snapshot`` so a run directory is self-describing.

Exit codes: 0 success, 2 config validation, 3 runtime abort (non-finite
loss), 4 I/O.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import divergences, metrics, training
from .augment import AugmentPolicy
from .data import DatasetManifest, SyntheticSpec, load_dataset
from .losses import LossWeights
from .models import ClassifierSpec, build_classifier, freeze, load_checkpoint
from .training import CriticConfig, RunAbortError, SGDConfig, TrainConfig

__all__ = ["main", "ConfigError", "load_config"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """Invalid or unknown configuration, tagged with the offending key path."""


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {}
    for key, value in data.items():
        target = _SECTION_TYPES.get((cls, key))
        if target is not None and value is not None:
            value = _build_section(target, value, f"{path}.{key}")
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_SECTION_TYPES = {
    (TrainConfig, "sgd"): SGDConfig,
    (TrainConfig, "critic"): CriticConfig,
    (TrainConfig, "weights"): LossWeights,
    (DatasetManifest, "synthetic"): SyntheticSpec,
}


@dataclasses.dataclass
class RunConfig:
    """Fully-resolved run configuration: one object per config-file section."""

    model: ClassifierSpec
    train: TrainConfig
    augment: AugmentPolicy
    dataset: DatasetManifest
    n_bins: int = 15
    calibrate: bool = False
    data_root: Path | None = None

    def snapshot_dict(self) -> dict:
        doc = {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "augment": dataclasses.asdict(self.augment),
            "dataset": dataclasses.asdict(self.dataset),
            "metrics": {"n_bins": self.n_bins, "calibrate": self.calibrate},
        }
        if self.data_root is not None:
            doc["dataset"]["root"] = str(self.data_root)
        return doc


def load_config(path: Path, phase: str, seed: int | None = None, ablation: str | None = None) -> RunConfig:
    """Parse and validate a config file; CLI flags override seed and ablation."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no config file at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    known = {"model", "train", "augment", "dataset", "metrics"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown key")
    if "model" not in doc or "dataset" not in doc:
        raise ConfigError("config needs at least 'model' and 'dataset' sections")

    model = _build_section(ClassifierSpec, doc["model"], "model")

    train_doc = dict(doc.get("train", {}))
    train_doc["phase"] = phase
    if seed is not None:
        train_doc["seed"] = seed
    if ablation is not None:
        train_doc["ablation"] = ablation
    train = _build_section(TrainConfig, train_doc, "train")

    augment = _build_section(AugmentPolicy, doc.get("augment", {}), "augment")

    dataset_doc = dict(doc["dataset"])
    data_root = dataset_doc.pop("root", None) or os.environ.get("AIKD_DATA_ROOT")
    if dataset_doc.get("source") == "synthetic":
        spec = _build_section(SyntheticSpec, dataset_doc.get("synthetic", {}), "dataset.synthetic")
        from .data import generate_synthetic

        _, _, dataset = generate_synthetic(spec)
        extra = set(dataset_doc) - {"source", "synthetic", "name"}
        if extra:
            raise ConfigError(
                f"dataset.{sorted(extra)[0]}: synthetic manifests are derived; remove this key"
            )
    else:
        dataset_doc["normalization"] = tuple(
            tuple(ch) for ch in dataset_doc.get("normalization", ((0.5,) * 3, (0.25,) * 3))
        )
        dataset = _build_section(DatasetManifest, dataset_doc, "dataset")
        if data_root is None:
            raise ConfigError("dataset.root: required (or set AIKD_DATA_ROOT)")

    metrics_doc = dict(doc.get("metrics", {}))
    for key in metrics_doc:
        if key not in ("n_bins", "calibrate"):
            raise ConfigError(f"metrics.{key}: unknown key")
    n_bins = int(metrics_doc.get("n_bins", 15))
    if n_bins < 1:
        raise ConfigError("metrics.n_bins: must be at least 1")

    if model.num_classes != dataset.num_classes:
        raise ConfigError(
            f"model.num_classes: {model.num_classes} does not match dataset ({dataset.num_classes})"
        )
    return RunConfig(
        model=model,
        train=train,
        augment=augment,
        dataset=dataset,
        n_bins=n_bins,
        calibrate=bool(metrics_doc.get("calibrate", False)),
        data_root=Path(data_root) if data_root else None,
    )


def _write_snapshot(out_dir: Path, config: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.snapshot").write_text(
        json.dumps(config.snapshot_dict(), indent=2, sort_keys=True) + "\n"
    )


def cmd_pretrain(args) -> int:
    config = load_config(args.config, phase="pretrain", seed=args.seed)
    out_dir = Path(args.out)
    train_src, val_src = load_dataset(config.dataset, config.data_root)
    _write_snapshot(out_dir, config)
    ckpt = training.pretrain(
        config.train, config.model, train_src, val_src, out_dir / "phase1",
        policy=config.augment, resume=args.resume,
    )
    print(f"pretrain complete: {ckpt}")
    return EXIT_OK


def cmd_distill(args) -> int:
    config = load_config(args.config, phase="distill", seed=args.seed, ablation=args.ablation)
    out_dir = Path(args.out)
    superior = Path(args.superior) if args.superior else None
    if training.preset_needs_superior(config.train.ablation) and superior is None:
        raise ConfigError(
            f"ablation {config.train.ablation!r} needs a phase-1 checkpoint (--superior)"
        )
    train_src, val_src = load_dataset(config.dataset, config.data_root)
    _write_snapshot(out_dir, config)
    ckpt = training.distill(
        config.train, config.model, superior, train_src, val_src, out_dir / "phase2",
        policy=config.augment, resume=args.resume,
    )
    print(f"distill complete: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config, phase="distill", seed=args.seed)
    payload = load_checkpoint(args.ckpt)
    ckpt_spec = ClassifierSpec(**payload["spec"])
    if ckpt_spec != config.model:
        raise ConfigError(f"model: checkpoint spec {ckpt_spec} does not match config {config.model}")
    model = build_classifier(ckpt_spec, seed=0)
    model.load_state_dict(payload["state_dict"])
    freeze(model)
    _, val_src = load_dataset(config.dataset, config.data_root)
    out_dir = Path(args.out)
    _write_snapshot(out_dir, config)
    calibrate = bool(args.calibrate or config.calibrate)
    report, bins = metrics.evaluate(
        model, val_src, n_bins=config.n_bins, calibrate=calibrate, crop=config.augment.crop
    )
    (out_dir / "metrics.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    metrics.write_reliability_csv(out_dir / "reliability.csv", bins)
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    return EXIT_OK


_AGGREGATE_KEYS = ("top1_error", "top5_error", "macro_f1", "ece", "ece_after_ts")


def cmd_aggregate(args) -> int:
    """Mean and sample standard deviation of metrics across homogeneous runs."""
    rows, identities = [], []
    for run_dir in map(Path, args.run_dirs):
        metrics_path = None
        for candidate in (run_dir / "phase2", run_dir / "phase1", run_dir):
            if (candidate / "metrics.json").is_file():
                metrics_path = candidate / "metrics.json"
                break
        if metrics_path is None:
            raise FileNotFoundError(f"no metrics.json under {run_dir}")
        snapshot = run_dir / "config.snapshot"
        if not snapshot.is_file():
            raise FileNotFoundError(f"no config.snapshot under {run_dir}")
        doc = json.loads(snapshot.read_text())
        identities.append(
            (doc["dataset"]["name"], doc["model"]["architecture"], doc["model"]["num_classes"])
        )
        rows.append(json.loads(metrics_path.read_text()))
    if len(set(identities)) > 1:
        raise ConfigError(f"runs are not comparable: {sorted(set(identities))}")
    summary = {
        "n_runs": len(rows),
        "dataset": identities[0][0],
        "architecture": identities[0][1],
        "std_convention": "sample (n-1)",
        "metrics": {},
    }
    for key in _AGGREGATE_KEYS:
        values = [row[key] for row in rows if row.get(key) is not None]
        if len(values) != len(rows):
            continue
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        summary["metrics"][key] = {"mean": mean, "std": std}
    out = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(out + "\n")
    print(out)
    return EXIT_OK


def cmd_divergence_demo(args) -> int:
    report = divergences.parallel_lines_case(args.theta, grid=args.grid)
    print(json.dumps(report.to_json_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aikd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="run directory for outputs")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("pretrain", help="phase 1: train the baseline classifier from scratch")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest epoch checkpoint")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("distill", help="phase 2: adversarial self-distillation")
    common(p)
    p.add_argument("--superior", default=None, help="phase-1 checkpoint path")
    p.add_argument("--ablation", default=None, choices=training.ABLATIONS)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--calibrate", action="store_true", help="fit a temperature and report post-TS ECE")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("aggregate", help="mean +/- std of metrics across run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None, help="optional summary JSON path")
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("divergence-demo", help="distances between two parallel line segments")
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--grid", type=int, default=16)
    p.set_defaults(fn=cmd_divergence_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAbortError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
