import numpy as np
import pytest

from coseg import (
    BinaryMask,
    Modality,
    Spacing,
    Study,
    Volume,
    geometry_equal,
    load_study,
    load_volume,
    save_study,
    save_volume,
    validate_study,
)
from coseg.volume import MissingDataError, VolumeFormatError


def make_volume(dims=(4, 4, 4), value=1.0, spacing=(0.75, 0.75, 5.0), modality="T2"):
    return Volume(
        np.full(dims, value, dtype=np.float32), Spacing(*spacing), modality=modality
    )


class TestSpacing:
    def test_positive_required(self):
        with pytest.raises(ValueError):
            Spacing(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            Spacing(1.0, -1.0, 1.0)

    def test_anisotropy_preserved(self):
        s = Spacing(0.75, 0.75, 5.0)
        assert s.as_tuple() == (0.75, 0.75, 5.0)


class TestVolume:
    def test_rejects_non_finite(self):
        bad = np.ones((2, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            Volume(bad, Spacing(1, 1, 1), modality="T2")

    def test_voxels_immutable(self):
        v = make_volume()
        with pytest.raises(ValueError):
            v.voxels[0, 0, 0] = 2.0

    def test_mask_binarity_enforced(self):
        bad = np.full((2, 2, 2), 0.5, dtype=np.float32)
        with pytest.raises(ValueError, match="0 or 1"):
            BinaryMask(bad, Spacing(1, 1, 1), target_modality="T2")


class TestGeometryEqual:
    def test_reflexive(self):
        v = make_volume()
        assert geometry_equal(v, v)

    def test_dim_mismatch(self):
        assert not geometry_equal(make_volume((4, 4, 4)), make_volume((4, 4, 5)))

    def test_tolerance(self):
        a = make_volume(spacing=(0.75, 0.75, 5.0))
        b = make_volume(spacing=(0.75 + 1e-9, 0.75, 5.0))
        c = make_volume(spacing=(0.75 + 1e-3, 0.75, 5.0))
        assert geometry_equal(a, b)
        assert not geometry_equal(a, c)

    def test_equivalence_relation(self, rng):
        # perturbations far below tolerance keep the relation transitive
        base = rng.uniform(0.5, 5.0, size=3)
        volumes = [
            make_volume(spacing=tuple(base + rng.uniform(-1e-9, 1e-9, size=3)))
            for _ in range(4)
        ]
        for a in volumes:
            assert geometry_equal(a, a)
            for b in volumes:
                assert geometry_equal(a, b) == geometry_equal(b, a)
                for c in volumes:
                    if geometry_equal(a, b) and geometry_equal(b, c):
                        assert geometry_equal(a, c)


class TestVolumeIO:
    def test_round_trip_identity(self, tmp_path, rng):
        voxels = rng.standard_normal((5, 4, 3)).astype(np.float32)
        v = Volume(voxels, Spacing(0.75, 0.8, 5.0), (1.5, -2.0, 10.0), "T2")
        save_volume(v, tmp_path / "vol")
        loaded = load_volume(tmp_path / "vol")
        assert loaded.dims == v.dims
        assert loaded.spacing == v.spacing
        assert loaded.origin == v.origin
        assert loaded.modality == v.modality
        assert np.array_equal(loaded.voxels, v.voxels)

    def test_payload_is_x_fastest(self, tmp_path):
        voxels = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        save_volume(Volume(voxels, Spacing(1, 1, 1), modality="CT"), tmp_path / "v")
        raw = np.frombuffer((tmp_path / "v.f32raw").read_bytes(), dtype="<f4")
        # linear index x + nx*(y + ny*z)
        expected = [voxels[x, y, z] for z in range(2) for y in range(2) for x in range(2)]
        assert raw.tolist() == expected

    def test_size_mismatch(self, tmp_path):
        save_volume(make_volume((4, 4, 4)), tmp_path / "v")
        payload = (tmp_path / "v.f32raw").read_bytes()
        (tmp_path / "v.f32raw").write_bytes(payload[:-4])  # 63 floats
        with pytest.raises(VolumeFormatError, match="63"):
            load_volume(tmp_path / "v")

    def test_missing_sidecar(self, tmp_path):
        save_volume(make_volume(), tmp_path / "v")
        (tmp_path / "v.json").unlink()
        with pytest.raises(MissingDataError):
            load_volume(tmp_path / "v")

    def test_non_finite_payload_rejected(self, tmp_path):
        save_volume(make_volume((2, 2, 2)), tmp_path / "v")
        bad = np.full(8, np.inf, dtype="<f4")
        (tmp_path / "v.f32raw").write_bytes(bad.tobytes())
        with pytest.raises(VolumeFormatError, match="non-finite"):
            load_volume(tmp_path / "v")

    def test_sidecar_spacing_passthrough(self, tmp_path):
        save_volume(make_volume(spacing=(0.75, 0.75, 5.0)), tmp_path / "v")
        assert load_volume(tmp_path / "v").spacing.dz == 5.0


class TestValidateStudy:
    def test_well_formed(self, small_study):
        assert validate_study(small_study) == []

    def test_mask_without_volume(self, small_study):
        volumes = dict(small_study.volumes)
        volumes.pop(Modality.PET)
        broken = Study(small_study.patient_id, volumes, small_study.masks)
        errors = validate_study(broken)
        assert len(errors) == 1 and "PET" in errors[0]

    def test_geometry_mismatch_reported(self, small_study):
        volumes = dict(small_study.volumes)
        odd = make_volume((3, 3, 3), modality="T1")
        volumes[Modality.T1] = odd
        errors = validate_study(Study("p", volumes, small_study.masks))
        assert any("geometry" in e for e in errors)


class TestStudyIO:
    def test_round_trip(self, tmp_path, small_study):
        save_study(small_study, tmp_path / "s0")
        loaded = load_study(tmp_path / "s0")
        assert loaded.patient_id == small_study.patient_id
        assert set(loaded.volumes) == set(small_study.volumes)
        assert set(loaded.masks) == set(small_study.masks)
        for m, v in small_study.volumes.items():
            assert np.array_equal(loaded.volumes[m].voxels, v.voxels)
        for m, k in small_study.masks.items():
            assert np.array_equal(loaded.masks[m].voxels, k.voxels)
        assert validate_study(loaded) == []

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingDataError):
            load_study(tmp_path)
