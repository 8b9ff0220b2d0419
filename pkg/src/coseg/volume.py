"""Geometric data model: volumes, binary masks, and co-registered studies.

A :class:`Volume` is a dense 3D scalar field with physical spacing and
origin.  Arrays are indexed ``[x, y, z]`` (shape ``(nx, ny, nz)``) and
stored as 32-bit floats.  On disk a volume is a raw little-endian
float32 payload (``<name>.f32raw``, x-fastest order) plus a JSON
sidecar (``<name>.json``) carrying dims, spacing, origin, and modality.

Volumes, masks, and studies are treated as immutable after
construction; they can be shared freely between worker processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

# Spacing/origin components closer than this (mm) are considered equal.
# Far below voxel scale; absorbs decimal round-trip noise.
GEOMETRY_TOL_MM = 1e-6


class Modality(str, Enum):
    T1 = "T1"
    T2 = "T2"
    CT = "CT"
    PET = "PET"
    PROB = "PROB"


# Modalities for which ground-truth / predicted masks exist.
MASK_TARGETS = (Modality.T2, Modality.PET)


class VolumeFormatError(ValueError):
    """Raised when an on-disk volume or manifest is malformed."""


class MissingDataError(FileNotFoundError):
    """Raised when a required data file or modality is absent."""


@dataclass(frozen=True)
class Spacing:
    """Voxel spacing in millimeters.  Anisotropy (dz >> dx) is expected."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ValueError(f"spacing components must be positive, got {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)


def _check_voxels(voxels: np.ndarray) -> np.ndarray:
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {voxels.shape}")
    if not np.all(np.isfinite(voxels)):
        raise ValueError("voxel values must be finite (no NaN/Inf)")
    return voxels


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field with physical geometry and a modality tag."""

    voxels: np.ndarray
    spacing: Spacing
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    modality: Modality = Modality.PROB

    def __post_init__(self):
        object.__setattr__(self, "voxels", _check_voxels(self.voxels))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        self.voxels.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        """Same geometry and modality, new voxel data."""
        return Volume(voxels, self.spacing, self.origin, self.modality)


@dataclass(frozen=True)
class BinaryMask:
    """A {0,1} volume geometrically aligned to a reference Volume."""

    voxels: np.ndarray
    spacing: Spacing
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    target_modality: Modality = Modality.T2

    def __post_init__(self):
        voxels = _check_voxels(self.voxels)
        if not np.all((voxels == 0.0) | (voxels == 1.0)):
            raise ValueError("mask voxels must be exactly 0 or 1")
        object.__setattr__(self, "voxels", voxels)
        target = Modality(self.target_modality)
        if target not in MASK_TARGETS:
            raise ValueError(f"mask target must be one of {MASK_TARGETS}, got {target}")
        object.__setattr__(self, "target_modality", target)
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        self.voxels.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.voxels))

    def with_voxels(self, voxels: np.ndarray) -> "BinaryMask":
        return BinaryMask(voxels, self.spacing, self.origin, self.target_modality)


def geometry_equal(a, b) -> bool:
    """True iff dims match exactly and spacing/origin agree within tolerance."""
    if a.dims != b.dims:
        return False
    sa, sb = a.spacing.as_tuple(), b.spacing.as_tuple()
    if any(abs(x - y) > GEOMETRY_TOL_MM for x, y in zip(sa, sb)):
        return False
    return all(abs(x - y) <= GEOMETRY_TOL_MM for x, y in zip(a.origin, b.origin))


@dataclass(frozen=True)
class Study:
    """One patient's co-registered volumes plus ground-truth masks.

    All members live on a single voxel grid; ``validate_study`` checks
    the invariants without raising.
    """

    patient_id: str
    volumes: dict[Modality, Volume] = field(default_factory=dict)
    masks: dict[Modality, BinaryMask] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "volumes", {Modality(k): v for k, v in self.volumes.items()}
        )
        object.__setattr__(
            self, "masks", {Modality(k): v for k, v in self.masks.items()}
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        member = next(iter(self.volumes.values()), None) or next(
            iter(self.masks.values())
        )
        return member.dims

    @property
    def spacing(self) -> Spacing:
        member = next(iter(self.volumes.values()), None) or next(
            iter(self.masks.values())
        )
        return member.spacing

    @property
    def origin(self) -> tuple[float, float, float]:
        member = next(iter(self.volumes.values()), None) or next(
            iter(self.masks.values())
        )
        return member.origin


def validate_study(study: Study) -> list[str]:
    """Check Study invariants; returns a list of violation messages.

    An empty list means the study is well-formed: all members share one
    grid, every mask's target modality has a volume, and masks are
    binary (binarity is normally enforced at construction, but data
    loaded through other paths is re-checked here).
    """
    errors: list[str] = []
    members = [(m.value, v) for m, v in study.volumes.items()]
    members += [(f"mask[{m.value}]", msk) for m, msk in study.masks.items()]
    if not members:
        return ["study has no volumes or masks"]

    ref_name, ref = members[0]
    for name, member in members[1:]:
        if not geometry_equal(ref, member):
            errors.append(f"geometry mismatch: {name} vs {ref_name}")

    for target, mask in study.masks.items():
        if target not in study.volumes:
            errors.append(f"mask[{target.value}] has no {target.value} volume")
        bad = ~((mask.voxels == 0.0) | (mask.voxels == 1.0))
        if bad.any():
            errors.append(
                f"mask[{target.value}] has {int(bad.sum())} non-binary voxels"
            )
    return errors


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------
#
# <stem>.f32raw : raw little-endian float32, x-fastest
#                 (linear index x + nx*(y + ny*z), i.e. Fortran order
#                 for arrays indexed [x, y, z])
# <stem>.json   : {"dims": [nx,ny,nz], "spacing_mm": [dx,dy,dz],
#                  "origin_mm": [x,y,z], "modality": "T1|T2|CT|PET|PROB"}


def _sidecar_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".f32raw":
        return path.with_suffix(".json")
    return path.parent / (path.name + ".json")


def _payload_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".f32raw":
        return path
    return path.parent / (path.name + ".f32raw")


def save_volume(volume, path) -> None:
    """Write a Volume or BinaryMask to ``<path>.f32raw`` + ``<path>.json``.

    Masks are stored in the same float format with values 0.0/1.0; the
    sidecar modality of a mask is its target modality.
    """
    payload = _payload_path(path)
    sidecar = _sidecar_path(path)
    modality = (
        volume.target_modality if isinstance(volume, BinaryMask) else volume.modality
    )
    sidecar_doc = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing.as_tuple()),
        "origin_mm": list(volume.origin),
        "modality": modality.value,
    }
    payload.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(volume.voxels.ravel(order="F"), dtype="<f4")
    payload.write_bytes(raw.tobytes())
    sidecar.write_text(json.dumps(sidecar_doc, indent=1))


def load_volume(path, as_mask: bool = False, target=None):
    """Load a volume (or, with ``as_mask=True``, a BinaryMask) from disk.

    Round-trips ``save_volume`` bit-exactly.  Raises
    :class:`MissingDataError` if a file is absent and
    :class:`VolumeFormatError` on payload/sidecar inconsistencies.
    """
    payload = _payload_path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise MissingDataError(f"missing sidecar {sidecar}")
    if not payload.exists():
        raise MissingDataError(f"missing payload {payload}")

    try:
        doc = json.loads(sidecar.read_text())
        dims = tuple(int(d) for d in doc["dims"])
        spacing = Spacing(*(float(s) for s in doc["spacing_mm"]))
        origin = tuple(float(c) for c in doc["origin_mm"])
        modality = Modality(doc["modality"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"bad sidecar {sidecar}: {exc}") from exc

    raw = np.frombuffer(payload.read_bytes(), dtype="<f4")
    expected = int(np.prod(dims))
    if raw.size != expected:
        raise VolumeFormatError(
            f"{payload}: payload holds {raw.size} floats, dims {dims} need {expected}"
        )
    if not np.all(np.isfinite(raw)):
        raise VolumeFormatError(f"{payload}: non-finite voxel values")
    voxels = raw.reshape(dims, order="F")

    if as_mask:
        if not np.all((voxels == 0.0) | (voxels == 1.0)):
            raise VolumeFormatError(f"{payload}: mask payload has non-binary values")
        return BinaryMask(voxels, spacing, origin, target or modality)
    return Volume(voxels, spacing, origin, modality)


# ---------------------------------------------------------------------------
# Study directories
# ---------------------------------------------------------------------------
#
# study.json: {"patient_id": ..., "volumes": {"T2": "t2", ...},
#              "masks": {"T2": "mask_t2", ...}}  (values are file stems)


def save_study(study: Study, directory) -> Path:
    """Write a study directory with a ``study.json`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"patient_id": study.patient_id, "volumes": {}, "masks": {}}
    for modality, volume in study.volumes.items():
        stem = modality.value.lower()
        save_volume(volume, directory / stem)
        manifest["volumes"][modality.value] = stem
    for target, mask in study.masks.items():
        stem = f"mask_{target.value.lower()}"
        save_volume(mask, directory / stem)
        manifest["masks"][target.value] = stem
    (directory / "study.json").write_text(json.dumps(manifest, indent=1))
    return directory / "study.json"


def load_study(directory) -> Study:
    directory = Path(directory)
    manifest_path = directory / "study.json"
    if not manifest_path.exists():
        raise MissingDataError(f"missing study manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        patient_id = str(manifest["patient_id"])
        volume_stems = dict(manifest.get("volumes", {}))
        mask_stems = dict(manifest.get("masks", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"bad study manifest {manifest_path}: {exc}") from exc

    volumes = {
        Modality(name): load_volume(directory / stem)
        for name, stem in volume_stems.items()
    }
    masks = {
        Modality(name): load_volume(
            directory / stem, as_mask=True, target=Modality(name)
        )
        for name, stem in mask_stems.items()
    }
    return Study(patient_id, volumes, masks)


def find_studies(data_dir) -> list[Path]:
    """All study directories (containing study.json) under ``data_dir``."""
    data_dir = Path(data_dir)
    if (data_dir / "study.json").exists():
        return [data_dir]
    found = sorted(p.parent for p in data_dir.glob("*/study.json"))
    if not found:
        raise MissingDataError(f"no study directories under {data_dir}")
    return found
