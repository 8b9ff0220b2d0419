"""Geometric augmentation of sampled patches.

One spatial transform (in-plane scaling, in-plane rotation, mirroring,
and a coarse elastic deformation) is drawn per call and applied
identically to every image and mask of the patch: linear interpolation
for images, nearest for masks, so masks stay binary.  Rotation and the
elastic field act in-plane only; with slice spacings far above the
in-plane resolution, through-plane resampling artifacts would dominate
any benefit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentParams:
    scale: tuple[float, float] = (0.9, 1.1)
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    mirror_axes: tuple[str, ...] = ("x", "y")
    elastic_grid_vox: int = 32
    elastic_max_disp_vox: float = 4.0
    rng_seed: int = 0

    def __post_init__(self):
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError(f"scale range must be positive, got {self.scale}")
        if self.rotation_deg[0] > self.rotation_deg[1]:
            raise ValueError("rotation range reversed")
        if any(a not in ("x", "y") for a in self.mirror_axes):
            raise ValueError("mirror axes limited to in-plane x/y")
        if self.elastic_max_disp_vox >= self.elastic_grid_vox:
            raise ValueError("elastic displacement must stay below the control-point spacing")

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentParams":
        return cls(
            scale=(1.0, 1.0),
            rotation_deg=(0.0, 0.0),
            mirror_axes=(),
            elastic_max_disp_vox=0.0,
            rng_seed=rng_seed,
        )


def _draw_transform(params: AugmentParams, dims, rng):
    scale = rng.uniform(params.scale[0], params.scale[1])
    angle = np.deg2rad(rng.uniform(params.rotation_deg[0], params.rotation_deg[1]))
    mirror = {axis: bool(rng.integers(0, 2)) for axis in ("x", "y") if axis in params.mirror_axes}
    elastic = None
    if params.elastic_max_disp_vox > 0:
        grid = params.elastic_grid_vox
        n_ctrl = [max(2, int(np.ceil((n - 1) / grid)) + 1) for n in dims]
        elastic = rng.uniform(
            -params.elastic_max_disp_vox, params.elastic_max_disp_vox, size=(2, *n_ctrl)
        )
    return scale, angle, mirror, elastic


def _input_coordinates(dims, scale, angle, mirror, elastic, grid_vox):
    nx, ny, nz = dims
    x, y, z = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    if mirror.get("x"):
        x = (nx - 1) - x
    if mirror.get("y"):
        y = (ny - 1) - y

    if scale != 1.0 or angle != 0.0:
        cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
        u, v = x - cx, y - cy
        cos_a, sin_a = np.cos(-angle), np.sin(-angle)
        x = (cos_a * u - sin_a * v) / scale + cx
        y = (sin_a * u + cos_a * v) / scale + cy

    if elastic is not None:
        ctrl_coords = [x / grid_vox, y / grid_vox, z / grid_vox]
        for comp, target in ((0, x), (1, y)):
            disp = ndimage.map_coordinates(
                elastic[comp], ctrl_coords, order=1, mode="nearest"
            )
            target += disp
    return [x, y, z]


def augment(patch, params: AugmentParams, rng: np.random.Generator | None = None):
    """Apply one randomly drawn spatial transform to all patch arrays.

    Output dims equal input dims.  With identity parameters the patch
    comes back unchanged (bit-exact for masks).  Pass an explicit
    ``rng`` to stream independent draws; by default the transform is a
    pure function of ``params.rng_seed``.
    """
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    dims = patch.dims
    scale, angle, mirror, elastic = _draw_transform(params, dims, rng)
    coords = _input_coordinates(dims, scale, angle, mirror, elastic, params.elastic_grid_vox)

    images = {
        m: ndimage.map_coordinates(a, coords, order=1, mode="nearest").astype(np.float32)
        for m, a in patch.images.items()
    }
    masks = {
        m: ndimage.map_coordinates(a, coords, order=0, mode="nearest").astype(np.float32)
        for m, a in patch.masks.items()
    }
    return patch.replace_arrays(images, masks)
