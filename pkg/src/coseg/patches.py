"""Tumor-containing 3D patch extraction, aligned across modalities.

A patch is a window copied from every volume and mask of a study at
the same voxel coordinates.  Sampling picks a random foreground voxel
of the reference mask and then a random window containing it, so every
patch is guaranteed to show tumor tissue.  Volumes thinner than the
patch (the data has stacks down to 15 slices against a patch depth of
16) are reflect-padded first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import BinaryMask, Modality, Spacing, Study, Volume

TUMOR_REFERENCES = ("union_of_masks", "t2_mask", "pet_mask")


class EmptyReferenceError(ValueError):
    """Tumor-containing sampling requested but the reference mask is empty."""


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int] = (256, 256, 16)
    require_tumor: bool = True
    tumor_reference: str = "union_of_masks"

    def __post_init__(self):
        if any(int(p) < 1 for p in self.size):
            raise ValueError(f"patch size must be >= 1 per axis, got {self.size}")
        object.__setattr__(self, "size", tuple(int(p) for p in self.size))
        if self.tumor_reference not in TUMOR_REFERENCES:
            raise ValueError(f"tumor_reference must be one of {TUMOR_REFERENCES}")


@dataclass(frozen=True)
class Patch:
    """Aligned crops of one study: image arrays per modality, mask arrays
    per target, all float32 with identical dims."""

    images: dict[Modality, np.ndarray]
    masks: dict[Modality, np.ndarray]
    spacing: Spacing
    patient_id: str = ""
    offset: tuple[int, int, int] = (0, 0, 0)

    @property
    def dims(self) -> tuple[int, int, int]:
        member = next(iter(self.images.values()), None)
        if member is None:
            member = next(iter(self.masks.values()))
        return member.shape

    def replace_arrays(self, images, masks) -> "Patch":
        return Patch(images, masks, self.spacing, self.patient_id, self.offset)


def pad_array(voxels: np.ndarray, min_dims) -> np.ndarray:
    pad = [(0, max(0, int(m) - n)) for n, m in zip(voxels.shape, min_dims)]
    if not any(hi for _, hi in pad):
        return voxels
    # single reflection only: appended slice i mirrors slice n-2-i
    if any(hi > n - 1 for (_, hi), n in zip(pad, voxels.shape)):
        raise ValueError(
            f"cannot reflect-pad dims {voxels.shape} to {tuple(min_dims)}: "
            "requested size exceeds twice the data extent"
        )
    return np.pad(voxels, pad, mode="reflect")


def pad_to_min_shape(v, min_dims):
    """Reflect-pad (at the high end of each axis) up to ``min_dims``.

    Identity when already large enough.  The appended slices mirror the
    interior, so no artificial zero-intensity tissue is introduced;
    masks are padded with the same reflection.
    """
    padded = pad_array(v.voxels, min_dims)
    if padded is v.voxels:
        return v
    if isinstance(v, BinaryMask):
        return BinaryMask(padded, v.spacing, v.origin, v.target_modality)
    return Volume(padded, v.spacing, v.origin, v.modality)


def pad_to_min_depth(v, min_z: int):
    """Reflect-pad along z to at least ``min_z`` slices."""
    return pad_to_min_shape(v, (0, 0, min_z))


def reference_mask_array(study: Study, tumor_reference: str) -> np.ndarray:
    """The {0,1} array that must intersect every sampled patch."""
    if tumor_reference == "t2_mask":
        return study.masks[Modality.T2].voxels
    if tumor_reference == "pet_mask":
        return study.masks[Modality.PET].voxels
    arrays = [m.voxels for m in study.masks.values()]
    if not arrays:
        raise EmptyReferenceError(f"study {study.patient_id} has no masks")
    union = arrays[0]
    for a in arrays[1:]:
        union = np.maximum(union, a)
    return union


def sample_patch(study: Study, spec: PatchSpec, rng: np.random.Generator) -> Patch:
    """Sample one aligned patch; the same voxel window is cut from every
    volume and mask.

    With ``require_tumor`` a uniformly random foreground voxel of the
    reference mask is drawn first and the window is drawn uniformly
    among those containing it (clamped to bounds), so the cropped
    reference mask always has at least one foreground voxel.
    """
    size = spec.size
    images = {
        m: pad_array(v.voxels, size) for m, v in study.volumes.items()
    }
    masks = {m: pad_array(k.voxels, size) for m, k in study.masks.items()}
    dims = next(iter(images.values())).shape

    if spec.require_tumor:
        reference = pad_array(reference_mask_array(study, spec.tumor_reference), size)
        foreground = np.flatnonzero(reference)
        if foreground.size == 0:
            raise EmptyReferenceError(
                f"study {study.patient_id}: require_tumor with an all-zero "
                f"{spec.tumor_reference} reference"
            )
        anchor = np.unravel_index(rng.choice(foreground), reference.shape)
        start = tuple(
            int(rng.integers(max(0, a - p + 1), min(n - p, a) + 1))
            for a, p, n in zip(anchor, size, dims)
        )
    else:
        start = tuple(int(rng.integers(0, n - p + 1)) for p, n in zip(size, dims))

    window = tuple(slice(s, s + p) for s, p in zip(start, size))
    return Patch(
        images={m: np.ascontiguousarray(a[window]) for m, a in images.items()},
        masks={m: np.ascontiguousarray(a[window]) for m, a in masks.items()},
        spacing=study.spacing,
        patient_id=study.patient_id,
        offset=start,
    )
