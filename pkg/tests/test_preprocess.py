import numpy as np
import pytest

from coseg import (
    BinaryMask,
    Modality,
    ResamplePlan,
    Spacing,
    Volume,
    crop,
    preprocess_study,
    resample_inplane,
    suv_normalize,
    validate_study,
    zscore_normalize,
)
from coseg.preprocess import ZeroVarianceError


def volume_of(voxels, spacing=(1.0, 1.0, 1.0), modality="T2"):
    return Volume(np.asarray(voxels, dtype=np.float32), Spacing(*spacing), modality=modality)


class TestResample:
    def test_factor_two_geometry(self):
        v = volume_of(np.zeros((4, 4, 4)), spacing=(1.5, 1.5, 5.0))
        out = resample_inplane(v, ResamplePlan(0.75))
        assert out.dims == (8, 8, 4)
        assert out.spacing.as_tuple() == (0.75, 0.75, 5.0)

    def test_constant_reproduced(self):
        for target in (0.75, 1.0, 2.0):
            v = volume_of(np.full((6, 5, 3), 5.0), spacing=(1.3, 0.9, 5.0))
            out = resample_inplane(v, ResamplePlan(target))
            assert np.allclose(out.voxels, 5.0, atol=1e-5)

    def test_mask_nearest_box_oracle(self):
        # factor-2 nearest upsampling replicates each voxel into 2x2,
        # so a filled box quadruples its count; verify voxelwise against
        # an independent nearest-neighbor oracle.
        mask = np.zeros((10, 10, 4), dtype=np.float32)
        mask[2:6, 3:7, 1:3] = 1.0
        m = BinaryMask(mask, Spacing(1.5, 1.5, 5.0), target_modality="T2")
        out = resample_inplane(m, ResamplePlan(0.75))
        assert out.dims == (20, 20, 4)
        assert out.foreground_count == 4 * int(mask.sum())

        def oracle(arr, zoom):
            nx, ny, nz = arr.shape
            ox, oy = round(nx * zoom), round(ny * zoom)
            res = np.zeros((ox, oy, nz), dtype=arr.dtype)
            for i in range(ox):
                src_x = min(nx - 1, max(0, round((i + 0.5) / zoom - 0.5)))
                for j in range(oy):
                    src_y = min(ny - 1, max(0, round((j + 0.5) / zoom - 0.5)))
                    res[i, j, :] = arr[src_x, src_y, :]
            return res

        assert np.array_equal(out.voxels, oracle(mask, 2.0))

    def test_mask_stays_binary_with_linear_threshold(self, rng):
        mask = (rng.random((9, 7, 3)) > 0.6).astype(np.float32)
        m = BinaryMask(mask, Spacing(1.1, 1.3, 5.0), target_modality="PET")
        out = resample_inplane(m, ResamplePlan(0.75, mask_interp="linear_threshold_0.5"))
        assert set(np.unique(out.voxels)) <= {0.0, 1.0}

    def test_nz_and_dz_unchanged(self, rng):
        for _ in range(10):
            dims = tuple(int(d) for d in rng.integers(2, 12, size=3))
            sp = (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)), 5.0)
            v = volume_of(rng.standard_normal(dims), spacing=sp)
            out = resample_inplane(v, ResamplePlan(0.75))
            assert out.dims[2] == dims[2]
            assert out.spacing.dz == 5.0

    def test_extent_preserved_within_one_voxel(self):
        v = volume_of(np.zeros((7, 11, 3)), spacing=(1.27, 0.93, 5.0))
        out = resample_inplane(v, ResamplePlan(0.75))
        for axis in range(2):
            extent_in = v.dims[axis] * v.spacing.as_tuple()[axis]
            extent_out = out.dims[axis] * 0.75
            assert abs(extent_in - extent_out) <= 0.75

    def test_degenerate_dims_rejected(self):
        v = volume_of(np.zeros((2, 2, 2)), spacing=(0.1, 0.1, 5.0))
        with pytest.raises(ValueError, match="degenerate"):
            resample_inplane(v, ResamplePlan(10.0))


class TestZScore:
    def test_hand_computed(self):
        v = volume_of(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
        out = zscore_normalize(v)
        expected = np.array([-1.224745, 0.0, 1.224745])  # population std sqrt(2/3)
        assert np.allclose(out.voxels.ravel(), expected, atol=1e-6)

    def test_idempotent_on_standardized(self, rng):
        v = volume_of(rng.standard_normal((8, 8, 4)))
        once = zscore_normalize(v)
        twice = zscore_normalize(once)
        assert np.allclose(once.voxels, twice.voxels, atol=1e-5)

    def test_constant_rejected(self):
        with pytest.raises(ZeroVarianceError):
            zscore_normalize(volume_of(np.full((4, 4, 4), 3.0)))

    def test_output_statistics_property(self, rng):
        for _ in range(20):
            dims = tuple(int(d) for d in rng.integers(2, 16, size=3))
            v = volume_of(rng.uniform(-50, 200, size=dims))
            out = zscore_normalize(v).voxels.astype(np.float64)
            assert abs(out.mean()) < 1e-5
            assert abs(out.std() - 1.0) < 1e-4


class TestSUV:
    def test_hand_computed_unit_suv(self):
        pet = volume_of(np.full((3, 3, 2), 5000.0), modality="PET")
        out = suv_normalize(pet, 70.0, 3.5e8)
        assert np.allclose(out.voxels, 1.0, atol=1e-6)
        assert out.modality is Modality.PET

    def test_zero_maps_to_zero(self):
        pet = volume_of(np.zeros((2, 2, 2)), modality="PET")
        assert np.all(suv_normalize(pet, 70.0, 3.5e8).voxels == 0.0)

    def test_dose_inverse_proportionality(self, rng):
        pet = volume_of(rng.uniform(0, 1e4, size=(4, 4, 2)), modality="PET")
        single = suv_normalize(pet, 70.0, 1e8).voxels
        double = suv_normalize(pet, 70.0, 2e8).voxels
        assert np.allclose(double, single / 2.0)

    def test_linear_in_concentration(self, rng):
        base = rng.uniform(0, 1e4, size=(4, 4, 2)).astype(np.float32)
        out1 = suv_normalize(volume_of(base, modality="PET"), 70.0, 3.5e8).voxels
        # power-of-two scaling commutes bit-exactly with the SUV factor
        out4 = suv_normalize(volume_of(base * 4.0, modality="PET"), 70.0, 3.5e8).voxels
        assert np.array_equal(out4, out1 * np.float32(4.0))
        out3 = suv_normalize(volume_of(base * 3.0, modality="PET"), 70.0, 3.5e8).voxels
        assert np.allclose(out3, out1 * 3.0, rtol=1e-6)

    def test_invalid_inputs(self):
        pet = volume_of(np.zeros((2, 2, 2)), modality="PET")
        with pytest.raises(ValueError):
            suv_normalize(pet, 0.0, 3.5e8)
        with pytest.raises(ValueError):
            suv_normalize(pet, 70.0, -1.0)
        with pytest.raises(ValueError, match="PET"):
            suv_normalize(volume_of(np.zeros((2, 2, 2)), modality="T2"), 70.0, 3.5e8)


class TestCrop:
    def test_full_extent_identity(self, rng):
        v = volume_of(rng.standard_normal((5, 6, 7)))
        out = crop(v, ((0, 4), (0, 5), (0, 6)))
        assert np.array_equal(out.voxels, v.voxels)
        assert out.origin == v.origin

    def test_origin_arithmetic(self):
        v = Volume(
            np.zeros((10, 10, 10), dtype=np.float32),
            Spacing(0.75, 1.0, 5.0),
            origin=(1.0, 2.0, 3.0),
            modality="CT",
        )
        out = crop(v, ((2, 5), (0, 9), (0, 9)))
        assert out.dims == (4, 10, 10)
        assert out.origin == (1.0 + 2 * 0.75, 2.0, 3.0)

    def test_mask_kind_preserved(self, rng):
        mask = (rng.random((6, 6, 4)) > 0.5).astype(np.float32)
        m = BinaryMask(mask, Spacing(1, 1, 1), target_modality="PET")
        out = crop(m, ((1, 4), (2, 5), (0, 3)))
        assert isinstance(out, BinaryMask)
        assert set(np.unique(out.voxels)) <= {0.0, 1.0}

    def test_out_of_range_rejected(self):
        v = volume_of(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError, match="axis"):
            crop(v, ((0, 4), (0, 3), (0, 3)))


def test_preprocess_study_pipeline(small_study):
    plan = ResamplePlan(target_inplane=0.5)
    out = preprocess_study(
        small_study,
        plan,
        suv={"body_weight_kg": 70.0, "injected_dose_bq": 3.5e8},
    )
    assert validate_study(out) == []
    assert out.dims == (32, 32, 8)
    t2 = out.volumes[Modality.T2].voxels.astype(np.float64)
    assert abs(t2.mean()) < 1e-5 and abs(t2.std() - 1.0) < 1e-4
