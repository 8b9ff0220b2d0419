"""Intensity normalization, in-plane resampling, and cropping.

All operations are pure: they return new Volume/BinaryMask objects and
never mutate their inputs.  Mask-kind inputs yield mask-kind outputs,
so binarity is preserved through every path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Modality, Spacing, Volume

IMAGE_INTERP = ("cubic_bspline", "trilinear")
MASK_INTERP = ("nearest", "linear_threshold_0.5")


class ZeroVarianceError(ValueError):
    """Constant input where a nonzero spread is required."""


@dataclass(frozen=True)
class ResamplePlan:
    """In-plane resampling target and interpolation choices.

    Slice spacing (dz) is always kept as-is; only dx/dy are changed.
    """

    target_inplane: float = 0.75
    image_interp: str = "cubic_bspline"
    mask_interp: str = "nearest"

    def __post_init__(self):
        if not self.target_inplane > 0:
            raise ValueError("target_inplane must be positive")
        if self.image_interp not in IMAGE_INTERP:
            raise ValueError(f"image_interp must be one of {IMAGE_INTERP}")
        if self.mask_interp not in MASK_INTERP:
            raise ValueError(f"mask_interp must be one of {MASK_INTERP}")


def _resample_array(voxels, zoom_xy, order):
    # Voxel-center convention: output center i maps to input coordinate
    # (i + 0.5)/zoom - 0.5, which is scipy's grid_mode=True mapping.
    return ndimage.zoom(
        voxels,
        zoom=(zoom_xy[0], zoom_xy[1], 1.0),
        order=order,
        mode="nearest",
        grid_mode=True,
    )


def resample_inplane(v, plan: ResamplePlan):
    """Resample dx/dy to ``plan.target_inplane`` mm; nz and dz unchanged.

    Output dims are ``round(n * d / target)`` per in-plane axis and the
    origin is shifted so the physical extent (voxel outer edges) is
    preserved within one output voxel.
    """
    target = plan.target_inplane
    spacing = v.spacing
    zoom_xy = (spacing.dx / target, spacing.dy / target)
    nx, ny, nz = v.dims
    out_nx = int(round(nx * zoom_xy[0]))
    out_ny = int(round(ny * zoom_xy[1]))
    if out_nx < 1 or out_ny < 1:
        raise ValueError(
            f"resampling {v.dims} at {spacing.as_tuple()} mm to {target} mm "
            f"gives degenerate dims ({out_nx}, {out_ny})"
        )

    new_spacing = Spacing(target, target, spacing.dz)
    # Voxel-0 center moves so the grid's outer bounding box stays put.
    new_origin = (
        v.origin[0] + 0.5 * (target - spacing.dx),
        v.origin[1] + 0.5 * (target - spacing.dy),
        v.origin[2],
    )

    if isinstance(v, BinaryMask):
        if plan.mask_interp == "nearest":
            out = _resample_array(v.voxels, zoom_xy, order=0)
        else:
            out = _resample_array(v.voxels, zoom_xy, order=1) >= 0.5
        out = out.astype(np.float32)
        return BinaryMask(out, new_spacing, new_origin, v.target_modality)

    order = 3 if plan.image_interp == "cubic_bspline" else 1
    out = _resample_array(v.voxels.astype(np.float64), zoom_xy, order=order)
    return Volume(out.astype(np.float32), new_spacing, new_origin, v.modality)


def zscore_normalize(v: Volume) -> Volume:
    """Shift/scale so the volume has mean 0 and population std 1."""
    if v.voxels.size < 2:
        raise ValueError("z-score normalization needs at least 2 voxels")
    data = v.voxels.astype(np.float64)
    mean = data.mean()
    std = data.std()  # population std (ddof=0); fixed for reproducibility
    if std == 0.0:
        raise ZeroVarianceError(
            f"constant volume (value {data.flat[0]}) cannot be z-scored"
        )
    return v.with_voxels(((data - mean) / std).astype(np.float32))


def suv_normalize(pet: Volume, body_weight_kg: float, injected_dose_bq: float) -> Volume:
    """Convert PET activity concentration (Bq/ml) to body-weight SUV.

    SUV(x) = concentration(x) * body_weight_g / injected_dose_Bq, with
    the usual 1 g/ml tissue-density convention.  Input values must
    already be decay-corrected.
    """
    if pet.modality is not Modality.PET:
        raise ValueError(f"SUV normalization applies to PET volumes, got {pet.modality}")
    if not body_weight_kg > 0:
        raise ValueError("body weight must be positive")
    if not injected_dose_bq > 0:
        raise ValueError("injected dose must be positive")
    factor = body_weight_kg * 1000.0 / injected_dose_bq
    return pet.with_voxels(pet.voxels * np.float32(factor))


def crop(v, box):
    """Crop to inclusive voxel bounds ``((x0,x1),(y0,y1),(z0,z1))``.

    The origin shifts by the box offset times spacing, so cropped
    members remain geometrically aligned with each other.
    """
    dims = v.dims
    for axis, ((lo, hi), n) in enumerate(zip(box, dims)):
        if not (0 <= lo <= hi < n):
            raise ValueError(
                f"crop box {box} out of range for dims {dims} on axis {'xyz'[axis]}"
            )
    (x0, x1), (y0, y1), (z0, z1) = box
    voxels = np.ascontiguousarray(v.voxels[x0 : x1 + 1, y0 : y1 + 1, z0 : z1 + 1])
    spacing = v.spacing
    origin = (
        v.origin[0] + x0 * spacing.dx,
        v.origin[1] + y0 * spacing.dy,
        v.origin[2] + z0 * spacing.dz,
    )
    if isinstance(v, BinaryMask):
        return BinaryMask(voxels, spacing, origin, v.target_modality)
    return Volume(voxels, spacing, origin, v.modality)


def preprocess_study(study, plan: ResamplePlan, crop_box=None, suv=None):
    """Resample, optionally crop, and normalize one study.

    ``suv`` maps nothing or ``{"body_weight_kg": ..., "injected_dose_bq": ...}``
    for the PET volume; T1/T2 are z-scored, CT is left as-is.
    """
    from .volume import Study

    volumes = {}
    for modality, volume in study.volumes.items():
        out = resample_inplane(volume, plan)
        if crop_box is not None:
            out = crop(out, crop_box)
        if modality in (Modality.T1, Modality.T2):
            out = zscore_normalize(out)
        elif modality is Modality.PET and suv:
            out = suv_normalize(out, suv["body_weight_kg"], suv["injected_dose_bq"])
        volumes[modality] = out
    masks = {}
    for target, mask in study.masks.items():
        out = resample_inplane(mask, plan)
        if crop_box is not None:
            out = crop(out, crop_box)
        masks[target] = out
    return Study(study.patient_id, volumes, masks)
