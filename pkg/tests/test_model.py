import numpy as np
import pytest
import torch

from coseg import (
    TABLE_VARIANTS,
    ModelConfig,
    build_model,
    count_parameters,
    init_weights,
    load_checkpoint,
    save_checkpoint,
    swish,
)
from coseg.model import (
    ConfigError,
    DenseBlock,
    DenseBlockSpec,
    ShapeDivisibilityError,
    parse_variant_name,
)
from conftest import tiny_model_config


# --- independent per-layer parameter tally --------------------------------


def conv_params(cin, cout, k=27):
    return cin * cout * k + cout


def block_params(cin, growth):
    total, c = 0, cin
    for _ in range(3):
        total += conv_params(c, growth)
        c += growth
    return total + conv_params(3 * growth, (3 * growth) // 2, k=1)


def encoder_params(n_modalities, growths=(12, 28, 44, 60), init=48):
    total = conv_params(n_modalities, init)
    c = init
    for g in growths:
        total += block_params(c, g)
        c = (3 * g) // 2
    return total, c


def decoder_params(latent, skip_channels, growths=(12, 28, 44, 60), heads=1):
    total, c = 0, latent
    for level in reversed(range(len(growths))):
        concat = c + skip_channels[level]
        total += conv_params(concat, concat // 2, k=1)
        total += block_params(concat // 2, growths[level])
        c = (3 * growths[level]) // 2
    return total + conv_params(c, heads, k=1)


class TestParameterCounts:
    def test_single_dense_block_frozen_value(self):
        block = DenseBlock(48, DenseBlockSpec(growth=12))
        # per-layer: 15,564 + 19,452 + 23,340 convs + 666 compression
        assert count_parameters(block) == 15564 + 19452 + 23340 + 666 == 59022
        assert block_params(48, 12) == 59022

    def test_proposed_model_against_tally(self):
        model = build_model("E^{t1,t2}E^{pet}-D^{t2}D^{pet}")
        mri, latent_mri = encoder_params(2)
        pet, latent_pet = encoder_params(1)
        skips = tuple((3 * g) // 2 for g in (12, 28, 44, 60))
        expected = (
            mri
            + pet
            + 2 * decoder_params(latent_mri + latent_pet, skips)
        )
        assert count_parameters(model) == expected == 5617700

    def test_shared_decoder_model_against_tally(self):
        model = build_model("E^{t1,t2}E^{pet}-D^{t2,pet}")
        mri, latent_mri = encoder_params(2)
        pet, latent_pet = encoder_params(1)
        base = tuple((3 * g) // 2 for g in (12, 28, 44, 60))
        skips = (base[0] * 2, *base[1:])
        expected = mri + pet + decoder_params(latent_mri + latent_pet, skips, heads=2)
        assert count_parameters(model) == expected == 3932108


class TestVariants:
    def test_all_table_variants_build(self):
        for name in TABLE_VARIANTS:
            model = build_model(name)
            assert model.config.variant_name == name
            assert count_parameters(model) > 0

    def test_parse_round_trip(self):
        encoders, decoders = parse_variant_name("E^{t1,t2}E^{pet}-D^{t2}D^{pet}")
        assert encoders == [("T1", "T2"), ("PET",)]
        assert decoders == [("T2",), ("PET",)]

    def test_parse_rejects_garbage(self):
        for bad in ("nonsense", "E^{t2}", "E^{t2}-", "E^{t2}-D^{q9}"):
            with pytest.raises((ConfigError, ValueError)):
                ModelConfig.from_variant(bad)

    def test_decoder_without_encoder_rejected(self):
        with pytest.raises(ConfigError, match="supplying encoder"):
            ModelConfig.from_variant("E^{t1,t2}-D^{pet}")

    def test_shared_decoder_needs_two_encoders(self):
        with pytest.raises(ConfigError, match="two"):
            ModelConfig.from_variant("E^{t2,pet}-D^{t2,pet}")

    def test_config_json_round_trip(self):
        cfg = ModelConfig.from_variant("E^{t1,t2}E^{pet}-D^{t2,pet}")
        again = ModelConfig.from_json(cfg.to_json())
        assert again == cfg


class TestForward:
    @torch.no_grad()
    def test_shape_arithmetic_and_range(self):
        model = build_model(tiny_model_config())
        init_weights(model, 0)
        x = {"t1,t2": torch.randn(2, 64, 64, 16), "pet": torch.randn(1, 64, 64, 16)}
        outputs, shapes = model(x, collect_shapes=True)
        assert shapes[0] == [(32, 32, 8), (16, 16, 8), (8, 8, 4), (4, 4, 2)]
        for name in ("T2", "PET"):
            out = outputs[name]
            assert tuple(out.shape) == (1, 64, 64, 16)
            assert float(out.min()) > 0.0 and float(out.max()) < 1.0

    def test_z_preserved_across_level2_pooling(self):
        model = build_model(tiny_model_config())
        x = {"t1,t2": torch.randn(2, 32, 32, 16), "pet": torch.randn(1, 32, 32, 16)}
        _, shapes = model(x, collect_shapes=True)
        for encoder_shapes in shapes:
            assert encoder_shapes[0][2] == encoder_shapes[1][2]

    def test_zero_head_outputs_half(self):
        model = build_model(tiny_model_config("E^{t2}-D^{t2}"))
        init_weights(model, 1)
        with torch.no_grad():
            model.decoders[0].head.weight.zero_()
            model.decoders[0].head.bias.zero_()
        out = model({"t2": torch.randn(1, 16, 16, 8)})["T2"]
        assert torch.all(out == 0.5)

    def test_divisibility_error_names_axis(self):
        model = build_model(tiny_model_config())
        bad = {"t1,t2": torch.randn(2, 50, 64, 16), "pet": torch.randn(1, 50, 64, 16)}
        with pytest.raises(ShapeDivisibilityError, match="axis x"):
            model(bad)

    def test_batched_and_unbatched(self):
        model = build_model(tiny_model_config("E^{t2}-D^{t2}"))
        init_weights(model, 2)
        x = torch.randn(1, 16, 16, 8)
        single = model({"t2": x})["T2"]
        batched = model({"t2": x.unsqueeze(0)})["T2"]
        assert tuple(batched.shape) == (1, 1, 16, 16, 8)
        assert torch.equal(single, batched.squeeze(0))

    def test_forward_deterministic(self):
        model = build_model(tiny_model_config())
        init_weights(model, 3)
        x = {"t1,t2": torch.randn(2, 16, 16, 8), "pet": torch.randn(1, 16, 16, 8)}
        a = model(x)
        b = model(x)
        for k in a:
            assert torch.equal(a[k], b[k])

    def test_wrong_channel_count_rejected(self):
        model = build_model(tiny_model_config())
        with pytest.raises(ValueError, match="channels"):
            model({"t1,t2": torch.randn(1, 16, 16, 8), "pet": torch.randn(1, 16, 16, 8)})


class TestSharedDecoderFusion:
    def test_skip_channel_bookkeeping(self):
        model = build_model(tiny_model_config("E^{t2}E^{pet}-D^{t2,pet}"))
        assert model._decoder_sources[0] == (0, 1)
        # block outputs (3, 3, 6, 6); level-1 skip doubled by concatenation
        decoder = model.decoders[0]
        full_res = decoder.levels[-1]
        deepest = decoder.levels[0]
        assert full_res.compress.in_channels == 3 + 2 * 3  # prev out + concat skip
        assert deepest.compress.in_channels == 12 + 6     # latent + multiplied skip

    def test_fusion_values(self):
        model = build_model(tiny_model_config("E^{t2}E^{pet}-D^{t2,pet}"))
        spec = model.config.decoders[0]
        first = [torch.full((1, 2, 4, 4, 2), v) for v in (2.0, 3.0, 5.0, 7.0)]
        second = [torch.full((1, 2, 4, 4, 2), v) for v in (11.0, 13.0, 17.0, 19.0)]
        fused = model._fused_skips(spec, (0, 1), [first, second])
        assert fused[0].shape[1] == 4  # concatenated channels
        assert torch.all(fused[0][:, :2] == 2.0) and torch.all(fused[0][:, 2:] == 11.0)
        for level, expected in ((1, 39.0), (2, 85.0), (3, 133.0)):
            assert torch.all(fused[level] == expected)

    def test_separate_decoder_uses_own_encoder_skips(self):
        model = build_model(tiny_model_config("E^{t2}E^{pet}-D^{t2}D^{pet}"))
        assert model._decoder_sources == [(0,), (1,)]


class TestInit:
    def test_he_normal_std(self):
        conv = torch.nn.Conv3d(48, 8, 3, padding=1)  # 10,368 weights
        init_weights(conv, 0)
        std = float(conv.weight.std())
        expected = np.sqrt(2.0 / (27 * 48))
        assert abs(std - expected) / expected < 0.05
        assert torch.all(conv.bias == 0.0)

    def test_deterministic_per_seed(self):
        a = build_model(tiny_model_config())
        b = build_model(tiny_model_config())
        init_weights(a, 7)
        init_weights(b, 7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        init_weights(b, 8)
        assert any(
            not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters())
        )


class TestSwish:
    def test_values(self):
        assert float(swish(torch.tensor(0.0))) == 0.0
        assert abs(float(swish(torch.tensor(1.0))) - 0.731059) < 1e-5

    def test_monotone_nonnegative(self):
        xs = torch.linspace(0, 8, 200)
        ys = swish(xs)
        assert torch.all(ys[1:] >= ys[:-1])


def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_model_config("E^{t2}-D^{t2}"))
    init_weights(model, 5)
    save_checkpoint(model, tmp_path / "w.pt", seed=5)
    loaded = load_checkpoint(tmp_path / "w.pt")
    assert loaded.config == model.config
    x = {"t2": torch.randn(1, 16, 16, 8)}
    model.eval()
    assert torch.equal(model(x)["T2"], loaded(x)["T2"])
