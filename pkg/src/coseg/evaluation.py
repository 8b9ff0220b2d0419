"""Full-volume inference and per-fold evaluation reports.

Whole volumes are predicted by tiling overlapping patch-sized windows
(reflect-padded where the volume is smaller than a window) and
averaging the overlapping probabilities.  Reports carry one DSC/ASSD
row per patient and target; ASSD is undefined for empty predictions
and is recorded as a flagged missing value, excluded from the mean.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .metrics import UndefinedMetricError, assd, dsc
from .model import CoSegNet
from .patches import pad_array
from .training import TrainConfig, encoder_inputs, kfold_split, train
from .volume import BinaryMask, Modality, Study, Volume

PREDICTION_THRESHOLD = 0.5


def _window_starts(padded: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, padded - patch + 1, stride))
    if starts[-1] != padded - patch:
        starts.append(padded - patch)
    return starts


def default_patch_size(model: CoSegNet, dims) -> tuple[int, int, int]:
    """Smallest pooling-compatible window covering the given dims."""
    return tuple(
        max(d, ((n + d - 1) // d) * d)
        for n, d in zip(dims, model.config.patch_divisors)
    )


def predict_volume(
    model: CoSegNet,
    study: Study,
    patch_size=None,
    overlap: float = 0.5,
    device: str = "cpu",
):
    """Sliding-window probability maps and thresholded masks per target.

    Overlapping window predictions are averaged; volumes smaller than a
    window are reflect-padded and the result cropped back, so output
    geometry always equals the study geometry.  Masks are probabilities
    >= 0.5.
    """
    config = model.config
    dims = study.dims
    if patch_size is None:
        patch_size = default_patch_size(model, dims)
    patch_size = tuple(int(p) for p in patch_size)
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap fraction must lie in [0, 1)")

    arrays = {
        m: pad_array(v.voxels, patch_size) for m, v in study.volumes.items()
    }
    padded_dims = next(iter(arrays.values())).shape
    strides = [max(1, round(p * (1.0 - overlap))) for p in patch_size]
    starts = [
        _window_starts(n, p, s) for n, p, s in zip(padded_dims, patch_size, strides)
    ]

    sums = {t.value: np.zeros(padded_dims, dtype=np.float64) for t in config.targets}
    counts = np.zeros(padded_dims, dtype=np.float64)

    device = torch.device(device)
    model = model.to(device)
    model.eval()
    with torch.no_grad():
        for sx in starts[0]:
            for sy in starts[1]:
                for sz in starts[2]:
                    window = (
                        slice(sx, sx + patch_size[0]),
                        slice(sy, sy + patch_size[1]),
                        slice(sz, sz + patch_size[2]),
                    )
                    inputs = encoder_inputs(
                        {m: a[window] for m, a in arrays.items()}, config, device
                    )
                    outputs = model(inputs)
                    for name, prob in outputs.items():
                        sums[name][window] += prob.squeeze(0).cpu().numpy()
                    counts[window] += 1.0

    crop_box = tuple(slice(0, n) for n in dims)
    probabilities, masks = {}, {}
    for target in config.targets:
        mean = (sums[target.value] / counts)[crop_box].astype(np.float32)
        probabilities[target] = Volume(mean, study.spacing, study.origin, Modality.PROB)
        masks[target] = BinaryMask(
            (mean >= PREDICTION_THRESHOLD).astype(np.float32),
            study.spacing,
            study.origin,
            target,
        )
    return probabilities, masks


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatientMetrics:
    patient_id: str
    target: Modality
    dsc: float
    assd_mm: float | None

    @property
    def flagged_missing(self) -> bool:
        return self.assd_mm is None


@dataclass
class FoldReport:
    fold_id: int
    entries: list[PatientMetrics] = field(default_factory=list)

    def aggregates(self) -> dict:
        """Mean and population std per target, recomputed from entries."""
        out = {}
        for target in sorted({e.target for e in self.entries}, key=lambda t: t.value):
            rows = [e for e in self.entries if e.target == target]
            dscs = np.array([e.dsc for e in rows], dtype=np.float64)
            assds = np.array(
                [e.assd_mm for e in rows if e.assd_mm is not None], dtype=np.float64
            )
            out[target.value] = {
                "n": len(rows),
                "dsc_percent_mean": float(100.0 * dscs.mean()),
                "dsc_percent_std": float(100.0 * dscs.std()),
                "assd_mm_mean": float(assds.mean()) if assds.size else None,
                "assd_mm_std": float(assds.std()) if assds.size else None,
                "assd_missing": sum(1 for e in rows if e.flagged_missing),
            }
        return out

    def to_json(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "entries": [
                {
                    "patient_id": e.patient_id,
                    "target": e.target.value,
                    "dsc": e.dsc,
                    "assd_mm": e.assd_mm,
                    "flagged_missing": e.flagged_missing,
                }
                for e in self.entries
            ],
            "aggregates": self.aggregates(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FoldReport":
        return cls(
            fold_id=int(doc["fold_id"]),
            entries=[
                PatientMetrics(
                    patient_id=e["patient_id"],
                    target=Modality(e["target"]),
                    dsc=float(e["dsc"]),
                    assd_mm=None if e["assd_mm"] is None else float(e["assd_mm"]),
                )
                for e in doc["entries"]
            ],
        )

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["patient_id", "target", "dsc_percent", "assd_mm", "flagged_missing"]
            )
            for e in self.entries:
                writer.writerow(
                    [
                        e.patient_id,
                        e.target.value,
                        f"{100.0 * e.dsc:.4f}",
                        "" if e.assd_mm is None else f"{e.assd_mm:.6f}",
                        e.flagged_missing,
                    ]
                )


def evaluate(
    model: CoSegNet,
    studies,
    patch_size=None,
    overlap: float = 0.5,
    fold_id: int = 0,
    device: str = "cpu",
) -> FoldReport:
    """DSC and ASSD per patient and target against the study masks."""
    report = FoldReport(fold_id=fold_id)
    for study in studies:
        _, predicted = predict_volume(model, study, patch_size, overlap, device)
        for target in model.config.targets:
            if target not in study.masks:
                raise ValueError(
                    f"study {study.patient_id!r} lacks ground truth for {target.value}"
                )
            truth = study.masks[target]
            prediction = predicted[target]
            if truth.foreground_count == 0 and prediction.foreground_count == 0:
                entry = PatientMetrics(study.patient_id, target, 1.0, None)
            else:
                score = dsc(truth, prediction)
                try:
                    distance = assd(truth, prediction, study.spacing)
                except UndefinedMetricError:
                    distance = None
                entry = PatientMetrics(study.patient_id, target, score, distance)
            report.entries.append(entry)
    return report


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def crossval(
    cfg: TrainConfig,
    studies,
    k: int = 5,
    eval_overlap: float = 0.5,
    out_dir=None,
    epoch_callback=None,
) -> dict:
    """K-fold cross-validation: train on k-1 folds, evaluate the held-out
    fold; one training patient (smallest id) is held out per fold for
    validation.  Returns the pooled Table-1-shaped summary."""
    by_id = {s.patient_id: s for s in studies}
    folds = kfold_split(sorted(by_id), k=k, seed=cfg.seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for fold_id, fold_ids in enumerate(folds):
        test = [by_id[i] for i in fold_ids]
        pool_ids = sorted(i for i in by_id if i not in set(fold_ids))
        val_ids = pool_ids[:1]
        train_ids = pool_ids[1:] or val_ids
        result = train(
            cfg,
            [by_id[i] for i in train_ids],
            [by_id[i] for i in val_ids],
            epoch_callback=epoch_callback,
        )
        report = evaluate(
            result.model, test, overlap=eval_overlap, fold_id=fold_id, device=cfg.device
        )
        reports.append(report)
        if out_dir is not None:
            report.write_json(out_dir / f"fold_{fold_id}.json")
            report.write_csv(out_dir / f"fold_{fold_id}.csv")

    pooled = FoldReport(fold_id=-1)
    for report in reports:
        pooled.entries.extend(report.entries)
    summary = {
        "variant_name": cfg.model.variant_name,
        "k": k,
        "folds": [r.to_json() for r in reports],
        "pooled": pooled.aggregates(),
    }
    if out_dir is not None:
        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=1))
        pooled.write_csv(Path(out_dir) / "pooled.csv")
    return summary
