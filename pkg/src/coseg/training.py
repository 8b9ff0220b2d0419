"""Patch-based training with plateau learning-rate halving.

One trainer owns the model weights; patches are sampled per step with
an explicit seeded generator, so a run is fully reproducible from the
config seed.  The learning rate starts at 1e-4 and is halved whenever
the validation loss has not improved for eight consecutive epochs;
training stops early after a configurable number of epochs without
improvement and always returns the best-validation weights.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import AugmentParams, augment
from .losses import LossConfig, dice_loss
from .model import CoSegNet, ModelConfig, build_model, init_weights
from .patches import Patch, PatchSpec, sample_patch
from .volume import Modality, Study


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    lr0: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 1
    lr_factor: float = 0.5
    lr_patience: int = 8
    max_epochs: int = 300
    early_stop_patience: int = 40
    seed: int = 0
    patch: PatchSpec = PatchSpec()
    patches_per_patient: int = 50
    val_patches_per_patient: int = 4
    augment_params: AugmentParams | None = AugmentParams()
    loss: LossConfig = LossConfig()
    device: str = "cpu"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size != 1:
            raise ValueError("training uses a batch size of one")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def to_json(self) -> dict:
        doc = {
            "model": self.model.to_json(),
            "optimizer": {"lr0": self.lr0, "betas": list(self.betas), "eps": self.adam_eps},
            "batch_size": self.batch_size,
            "lr_schedule": {"factor": self.lr_factor, "patience": self.lr_patience},
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "seed": self.seed,
            "sampler": {
                "size": list(self.patch.size),
                "require_tumor": self.patch.require_tumor,
                "tumor_reference": self.patch.tumor_reference,
                "patches_per_patient": self.patches_per_patient,
                "val_patches_per_patient": self.val_patches_per_patient,
            },
            "loss": {"epsilon": self.loss.epsilon},
            "device": self.device,
        }
        if self.augment_params is None:
            doc["augment"] = None
        else:
            a = self.augment_params
            doc["augment"] = {
                "scale": list(a.scale),
                "rotation_deg": list(a.rotation_deg),
                "mirror_axes": list(a.mirror_axes),
                "elastic": [a.elastic_grid_vox, a.elastic_max_disp_vox],
                "rng_seed": a.rng_seed,
            }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        optimizer = doc.get("optimizer", {})
        schedule = doc.get("lr_schedule", {})
        sampler = doc.get("sampler", {})
        augment_doc = doc.get("augment", {})
        if augment_doc is None:
            augment_params = None
        else:
            elastic = augment_doc.get("elastic", [32, 4])
            augment_params = AugmentParams(
                scale=tuple(augment_doc.get("scale", (0.9, 1.1))),
                rotation_deg=tuple(augment_doc.get("rotation_deg", (-15.0, 15.0))),
                mirror_axes=tuple(augment_doc.get("mirror_axes", ("x", "y"))),
                elastic_grid_vox=int(elastic[0]),
                elastic_max_disp_vox=float(elastic[1]),
                rng_seed=int(augment_doc.get("rng_seed", 0)),
            )
        return cls(
            model=ModelConfig.from_json(doc["model"]),
            lr0=float(optimizer.get("lr0", 1e-4)),
            betas=tuple(optimizer.get("betas", (0.9, 0.999))),
            adam_eps=float(optimizer.get("eps", 1e-8)),
            batch_size=int(doc.get("batch_size", 1)),
            lr_factor=float(schedule.get("factor", 0.5)),
            lr_patience=int(schedule.get("patience", 8)),
            max_epochs=int(doc.get("max_epochs", 300)),
            early_stop_patience=int(doc.get("early_stop_patience", 40)),
            seed=int(doc.get("seed", 0)),
            patch=PatchSpec(
                size=tuple(sampler.get("size", (256, 256, 16))),
                require_tumor=bool(sampler.get("require_tumor", True)),
                tumor_reference=sampler.get("tumor_reference", "union_of_masks"),
            ),
            patches_per_patient=int(sampler.get("patches_per_patient", 50)),
            val_patches_per_patient=int(sampler.get("val_patches_per_patient", 4)),
            augment_params=augment_params,
            loss=LossConfig(float(doc.get("loss", {}).get("epsilon", 1e-5))),
            device=doc.get("device", "cpu"),
        )


def kfold_split(patient_ids, k: int = 5, seed: int = 0) -> list[list[str]]:
    """Disjoint folds covering all patients, sizes differing by at most
    one, deterministic per seed."""
    ids = list(patient_ids)
    if len(ids) < k:
        raise ValueError(f"cannot split {len(ids)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [list(fold) for fold in np.array_split(shuffled, k)]


class PlateauHalving:
    """Halve the learning rate when the monitored loss has not improved
    for ``patience`` consecutive epochs.

    Improvement means strictly beating the best value seen so far; the
    stale counter resets both on improvement and after a halving, so
    each halving accounts for one disjoint window of stale epochs.
    """

    def __init__(self, lr0: float, factor: float = 0.5, patience: int = 8):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


# ---------------------------------------------------------------------------
# Study/patch -> tensor bridging
# ---------------------------------------------------------------------------


def encoder_inputs(arrays: dict, config: ModelConfig, device="cpu") -> dict:
    """Stack per-modality arrays into one (channels, x, y, z) tensor per
    encoder, keyed by encoder name."""
    inputs = {}
    for encoder in config.encoders:
        missing = [m.value for m in encoder.input_modalities if m not in arrays]
        if missing:
            raise KeyError(f"missing modalities {missing} for encoder {encoder.name!r}")
        stacked = np.stack(
            [arrays[m] for m in encoder.input_modalities], axis=0
        ).astype(np.float32)
        inputs[encoder.name] = torch.from_numpy(stacked).to(device)
    return inputs


def patch_inputs(patch: Patch, config: ModelConfig, device="cpu") -> dict:
    return encoder_inputs(patch.images, config, device)


def study_inputs(study: Study, config: ModelConfig, device="cpu") -> dict:
    return encoder_inputs({m: v.voxels for m, v in study.volumes.items()}, config, device)


def patch_targets(patch: Patch, config: ModelConfig, device="cpu") -> dict:
    targets = {}
    for target in config.targets:
        if target not in patch.masks:
            raise KeyError(f"patch from {patch.patient_id!r} lacks a {target.value} mask")
        array = patch.masks[target][None].astype(np.float32)
        targets[target.value] = torch.from_numpy(array).to(device)
    return targets


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CoSegNet
    history: list = field(default_factory=list)
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    stopped_reason: str = "max_epochs"

    @property
    def final_train_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else float("nan")


def _sample_validation_patches(cfg, val_studies):
    rng = np.random.default_rng(cfg.seed + 1)
    patches = []
    for study in val_studies:
        for _ in range(cfg.val_patches_per_patient):
            patches.append(sample_patch(study, cfg.patch, rng))
    return patches


def _mean_loss(model, patches, cfg, device):
    model.eval()
    losses = []
    with torch.no_grad():
        for patch in patches:
            preds = model(patch_inputs(patch, cfg.model, device))
            loss = dice_loss(preds, patch_targets(patch, cfg.model, device), cfg.loss)
            losses.append(float(loss))
    model.train()
    return float(np.mean(losses))


def train(cfg: TrainConfig, train_studies, val_studies=None, epoch_callback=None) -> TrainResult:
    """Train one model; returns best-validation weights and the history.

    ``val_studies`` drives the plateau schedule and early stopping via a
    fixed set of validation patches sampled once up front; when empty,
    the epoch's mean training loss is monitored instead.  The optional
    ``epoch_callback(model, epoch, record)`` may return truthy to stop
    (used for target-metric stopping in smoke tests).
    """
    if not train_studies:
        raise ValueError("no training studies")
    device = torch.device(cfg.device)
    model = build_model(cfg.model).to(device)
    init_weights(model, cfg.seed)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.adam_eps
    )
    scheduler = PlateauHalving(cfg.lr0, cfg.lr_factor, cfg.lr_patience)
    rng = np.random.default_rng(cfg.seed)
    val_patches = _sample_validation_patches(cfg, val_studies or [])

    result = TrainResult(model=model)
    best_state = copy.deepcopy(model.state_dict())
    stale_epochs = 0
    steps_per_epoch = cfg.patches_per_patient * len(train_studies)

    for epoch in range(cfg.max_epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            study = train_studies[int(rng.integers(len(train_studies)))]
            patch = sample_patch(study, cfg.patch, rng)
            if cfg.augment_params is not None:
                patch = augment(patch, cfg.augment_params, rng)
            inputs = patch_inputs(patch, cfg.model, device)
            targets = patch_targets(patch, cfg.model, device)

            optimizer.zero_grad()
            loss = dice_loss(model(inputs), targets, cfg.loss)
            value = float(loss)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, "
                    f"patient {patch.patient_id!r}, lr {scheduler.lr:g}"
                )
            loss.backward()
            optimizer.step()
            epoch_losses.append(value)

        train_loss = float(np.mean(epoch_losses))
        val_loss = _mean_loss(model, val_patches, cfg, device) if val_patches else train_loss
        lr_next = scheduler.step(val_loss)
        for group in optimizer.param_groups:
            group["lr"] = lr_next
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": lr_next,
        }
        result.history.append(record)

        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale_epochs = 0
        else:
            stale_epochs += 1

        if epoch_callback is not None and epoch_callback(model, epoch, record):
            # user-directed stop keeps the current weights
            result.stopped_reason = "callback"
            best_state = None
            break
        if stale_epochs >= cfg.early_stop_patience:
            result.stopped_reason = "early_stop"
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result
