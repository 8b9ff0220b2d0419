"""Command-line entry point.

Subcommands: ``phantom``, ``preprocess``, ``train``, ``evaluate``,
``crossval``, ``count-params``.  Every run writes a ``run_manifest.json``
beside its outputs recording the command, a key-order-independent hash
of the config, the seeds involved, timestamps, and artifact paths.

Exit codes: 0 success, 2 unknown subcommand / bad usage, 3 malformed
config, 4 missing data.  Set ``COSEG_DETERMINISTIC=1`` to force the
backend's deterministic execution mode.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .evaluation import crossval, evaluate
from .model import (
    ConfigError,
    ModelConfig,
    build_model,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import PhantomSpec, generate_study
from .preprocess import ResamplePlan, preprocess_study
from .training import TrainConfig, kfold_split, train
from .volume import MissingDataError, VolumeFormatError, find_studies, load_study, save_study

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BAD_CONFIG = 3
EXIT_MISSING_DATA = 4


def config_hash(doc) -> str:
    """SHA-256 of the canonical JSON encoding; stable under key reordering."""
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: list = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""
    artifacts: list = field(default_factory=list)
    version: str = __version__

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1))
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"missing config file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


def _train_config(doc) -> TrainConfig:
    try:
        return TrainConfig.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad training config: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommands (each returns a list of artifact paths)
# ---------------------------------------------------------------------------


def cmd_phantom(args, manifest: RunManifest) -> list:
    doc = _load_json(args.spec) if args.spec else {}
    try:
        spec = PhantomSpec.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad phantom spec: {exc}") from exc
    out_dir = Path(args.out)
    artifacts = []
    for i in range(args.n):
        from dataclasses import replace

        study = generate_study(replace(spec, seed=spec.seed + i), f"phantom_{i:03d}")
        path = save_study(study, out_dir / study.patient_id)
        artifacts.append(str(path.parent))
    manifest.seeds = [spec.seed + i for i in range(args.n)]
    return artifacts


def cmd_preprocess(args, manifest: RunManifest) -> list:
    doc = _load_json(args.plan) if args.plan else {}
    try:
        plan = ResamplePlan(
            target_inplane=float(doc.get("target_inplane", 0.75)),
            image_interp=doc.get("image_interp", "cubic_bspline"),
            mask_interp=doc.get("mask_interp", "nearest"),
        )
        crop_box = doc.get("crop_box")
        if crop_box is not None:
            crop_box = tuple(tuple(int(v) for v in bounds) for bounds in crop_box)
        suv = doc.get("suv")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad preprocessing plan: {exc}") from exc

    out_dir = Path(args.out)
    artifacts = []
    for study_dir in find_studies(args.data):
        study = load_study(study_dir)
        processed = preprocess_study(study, plan, crop_box=crop_box, suv=suv)
        path = save_study(processed, out_dir / study.patient_id)
        artifacts.append(str(path.parent))
    return artifacts


def cmd_count_params(args, manifest: RunManifest) -> list:
    doc = _load_json(args.config)
    model_doc = doc.get("model", doc)
    config = ModelConfig.from_json(model_doc)
    model = build_model(config)
    count = count_parameters(model)
    print(count)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = out_dir / "parameter_count.json"
    result.write_text(
        json.dumps({"variant_name": config.variant_name, "parameter_count": count}, indent=1)
    )
    return [str(result)]


def _load_all_studies(data_dir):
    return [load_study(d) for d in find_studies(data_dir)]


def cmd_train(args, manifest: RunManifest) -> list:
    cfg = _train_config(_load_json(args.config))
    studies = _load_all_studies(args.data)
    by_id = {s.patient_id: s for s in studies}
    folds = kfold_split(sorted(by_id), k=args.k, seed=cfg.seed)
    if not 0 <= args.fold < len(folds):
        raise ConfigError(f"fold {args.fold} out of range for k={len(folds)}")
    test_ids = set(folds[args.fold])
    pool_ids = sorted(i for i in by_id if i not in test_ids)
    if not pool_ids:
        raise ConfigError("no training patients left outside the requested fold")
    val_ids = pool_ids[:1]
    train_ids = pool_ids[1:] or val_ids

    manifest.seeds = [cfg.seed]
    result = train(cfg, [by_id[i] for i in train_ids], [by_id[i] for i in val_ids])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = out_dir / "weights.pt"
    save_checkpoint(result.model, weights, seed=cfg.seed)
    history = out_dir / "history.json"
    history.write_text(
        json.dumps(
            {
                "fold": args.fold,
                "train_ids": train_ids,
                "val_ids": val_ids,
                "test_ids": sorted(test_ids),
                "best_val_loss": result.best_val_loss,
                "best_epoch": result.best_epoch,
                "stopped_reason": result.stopped_reason,
                "epochs": result.history,
            },
            indent=1,
        )
    )
    return [str(weights), str(weights.with_suffix(".json")), str(history)]


def cmd_evaluate(args, manifest: RunManifest) -> list:
    weights = Path(args.weights)
    if not weights.exists():
        raise MissingDataError(f"missing weights file {weights}")
    model = load_checkpoint(weights)
    studies = _load_all_studies(args.data)
    report = evaluate(model, studies, overlap=args.overlap, fold_id=args.fold)
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    json_path = stem.with_suffix(".json")
    csv_path = stem.with_suffix(".csv")
    report.write_json(json_path)
    report.write_csv(csv_path)
    return [str(json_path), str(csv_path)]


def cmd_crossval(args, manifest: RunManifest) -> list:
    cfg = _train_config(_load_json(args.config))
    studies = _load_all_studies(args.data)
    manifest.seeds = [cfg.seed]
    out_dir = Path(args.out)
    crossval(cfg, studies, k=args.k, out_dir=out_dir)
    return [str(out_dir / "summary.json"), str(out_dir / "pooled.csv")]


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coseg",
        description="Multimodal volumetric tumor co-segmentation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic multimodal studies")
    p.add_argument("--spec", help="phantom spec JSON (defaults apply when omitted)")
    p.add_argument("--n", type=int, default=1, help="number of studies")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom, config_path_attr="spec")

    p = sub.add_parser("preprocess", help="resample, crop, and normalize studies")
    p.add_argument("--data", required=True, help="directory of study directories")
    p.add_argument("--plan", help="resampling/normalization plan JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess, config_path_attr="plan")

    p = sub.add_parser("train", help="train one cross-validation fold")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--fold", type=int, default=0, help="held-out fold index")
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--data", required=True, help="directory of study directories")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train, config_path_attr="config")

    p = sub.add_parser("evaluate", help="evaluate weights on studies")
    p.add_argument("--weights", required=True, help="checkpoint .pt path")
    p.add_argument("--data", required=True, help="directory of study directories")
    p.add_argument("--out", required=True, help="report output stem or .json path")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_evaluate, config_path_attr=None)

    p = sub.add_parser("crossval", help="run full k-fold cross-validation")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossval, config_path_attr="config")

    p = sub.add_parser("count-params", help="print the trainable parameter count")
    p.add_argument("--config", required=True, help="model or training config JSON")
    p.add_argument("--out", default=".", help="directory for the manifest")
    p.set_defaults(func=cmd_count_params, config_path_attr="config")

    return parser


def _manifest_for(args) -> RunManifest:
    attr = getattr(args, "config_path_attr", None)
    doc = {}
    if attr:
        path = getattr(args, attr, None)
        if path and Path(path).exists():
            try:
                doc = json.loads(Path(path).read_text())
            except json.JSONDecodeError:
                doc = {}
    else:
        doc = {k: str(v) for k, v in vars(args).items() if not callable(v)}
    return RunManifest(command=args.command, config_hash=config_hash(doc), started_at=_now())


def main(argv=None) -> int:
    if os.environ.get("COSEG_DETERMINISTIC") == "1":
        import torch

        torch.use_deterministic_algorithms(True)

    parser = build_parser()
    args = parser.parse_args(argv)
    manifest = _manifest_for(args)
    try:
        artifacts = args.func(args, manifest)
    except (ConfigError, VolumeFormatError) as exc:
        _report_error(exc, EXIT_BAD_CONFIG)
        return EXIT_BAD_CONFIG
    except (MissingDataError, FileNotFoundError) as exc:
        _report_error(exc, EXIT_MISSING_DATA)
        return EXIT_MISSING_DATA

    manifest.finished_at = _now()
    manifest.artifacts = artifacts
    out = getattr(args, "out", None) or "."
    out_dir = Path(out)
    if out_dir.suffix:  # an output stem like report.json
        out_dir = out_dir.parent
    manifest.write(out_dir)
    return EXIT_OK


def _report_error(exc, code: int) -> None:
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(report), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
