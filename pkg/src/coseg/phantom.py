"""Synthetic co-registered multimodal studies with controllable necrosis.

The phantom encodes the central premise the pipeline must handle: the
anatomical (T2) tumor mask covers the whole ellipsoid while the
metabolic (PET) mask excludes a concentric necrotic core, so the two
ground-truth masks genuinely differ.  Intensities are piecewise
constant plus Gaussian noise -- the phantom's job is pipeline
verification, not realism.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .volume import BinaryMask, Modality, Spacing, Study, Volume


@dataclass(frozen=True)
class IntensityModel:
    background: float
    tumor_contrast: float
    noise_std: float


DEFAULT_INTENSITIES = {
    Modality.T1: IntensityModel(100.0, 40.0, 5.0),
    Modality.T2: IntensityModel(100.0, 80.0, 5.0),
    Modality.CT: IntensityModel(40.0, 25.0, 8.0),
    Modality.PET: IntensityModel(0.5, 5.0, 0.1),
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 16)
    spacing: Spacing = Spacing(0.75, 0.75, 5.0)
    tumor_center_mm: tuple[float, float, float] | None = None
    tumor_radii_mm: tuple[float, float, float] = (10.0, 10.0, 20.0)
    necrosis_fraction: float = 0.5
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.necrosis_fraction < 1.0):
            raise ValueError("necrosis_fraction must lie in [0, 1)")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if isinstance(self.spacing, (tuple, list)):
            object.__setattr__(self, "spacing", Spacing(*self.spacing))
        center = self.tumor_center_mm
        if center is None:
            center = tuple(
                (n - 1) / 2.0 * s for n, s in zip(self.dims, self.spacing.as_tuple())
            )
        object.__setattr__(self, "tumor_center_mm", tuple(float(c) for c in center))
        object.__setattr__(
            self, "tumor_radii_mm", tuple(float(r) for r in self.tumor_radii_mm)
        )
        intensities = {Modality(m): v for m, v in self.intensities.items()}
        object.__setattr__(self, "intensities", intensities)
        for axis, (c, r, n, s) in enumerate(
            zip(self.tumor_center_mm, self.tumor_radii_mm, self.dims, self.spacing.as_tuple())
        ):
            if r <= 0:
                raise ValueError("tumor radii must be positive")
            if c - r < -0.5 * s or c + r > (n - 0.5) * s:
                raise ValueError(
                    f"tumor extends outside the volume on axis {'xyz'[axis]}"
                )

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing.as_tuple()),
            "tumor_center_mm": list(self.tumor_center_mm),
            "tumor_radii_mm": list(self.tumor_radii_mm),
            "necrosis_fraction": self.necrosis_fraction,
            "intensities": {
                m.value: [v.background, v.tumor_contrast, v.noise_std]
                for m, v in self.intensities.items()
            },
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PhantomSpec":
        kwargs = {}
        if "dims" in doc:
            kwargs["dims"] = tuple(doc["dims"])
        if "spacing_mm" in doc:
            kwargs["spacing"] = Spacing(*doc["spacing_mm"])
        if "tumor_center_mm" in doc:
            kwargs["tumor_center_mm"] = tuple(doc["tumor_center_mm"])
        if "tumor_radii_mm" in doc:
            kwargs["tumor_radii_mm"] = tuple(doc["tumor_radii_mm"])
        if "necrosis_fraction" in doc:
            kwargs["necrosis_fraction"] = float(doc["necrosis_fraction"])
        if "intensities" in doc:
            kwargs["intensities"] = {
                Modality(m): IntensityModel(*vals) for m, vals in doc["intensities"].items()
            }
        if "seed" in doc:
            kwargs["seed"] = int(doc["seed"])
        return cls(**kwargs)


def _ellipsoid(dims, spacing, center, radii) -> np.ndarray:
    coords = [
        np.arange(n, dtype=np.float64) * s - c
        for n, s, c in zip(dims, spacing.as_tuple(), center)
    ]
    x, y, z = np.meshgrid(*coords, indexing="ij")
    rx, ry, rz = radii
    return (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 <= 1.0


def generate_study(spec: PhantomSpec, patient_id: str = "phantom_000") -> Study:
    """One co-registered study on a single grid, deterministic per seed.

    The T2 mask is the full tumor ellipsoid; the PET mask excludes the
    concentric necrotic core (radii scaled by ``necrosis_fraction``),
    where the PET signal also drops back to background.
    """
    rng = np.random.default_rng(spec.seed)
    spacing = spec.spacing
    tumor = _ellipsoid(spec.dims, spacing, spec.tumor_center_mm, spec.tumor_radii_mm)
    if spec.necrosis_fraction > 0:
        core_radii = tuple(r * spec.necrosis_fraction for r in spec.tumor_radii_mm)
        core = _ellipsoid(spec.dims, spacing, spec.tumor_center_mm, core_radii)
    else:
        core = np.zeros(spec.dims, dtype=bool)
    active = tumor & ~core

    volumes = {}
    for modality in sorted(spec.intensities, key=lambda m: m.value):
        model = spec.intensities[modality]
        signal_region = active if modality is Modality.PET else tumor
        voxels = np.full(spec.dims, model.background, dtype=np.float64)
        voxels[signal_region] += model.tumor_contrast
        voxels += rng.normal(0.0, model.noise_std, size=spec.dims)
        volumes[modality] = Volume(voxels.astype(np.float32), spacing, modality=modality)

    masks = {
        Modality.T2: BinaryMask(
            tumor.astype(np.float32), spacing, target_modality=Modality.T2
        ),
        Modality.PET: BinaryMask(
            active.astype(np.float32), spacing, target_modality=Modality.PET
        ),
    }
    return Study(patient_id, volumes, masks)


def generate_studies(spec: PhantomSpec, n: int) -> list[Study]:
    """``n`` studies with consecutive seeds and distinct patient ids."""
    return [
        generate_study(replace(spec, seed=spec.seed + i), patient_id=f"phantom_{i:03d}")
        for i in range(n)
    ]
