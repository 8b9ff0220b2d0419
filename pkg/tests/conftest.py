import numpy as np
import pytest

from coseg import ModelConfig, PhantomSpec, Spacing, generate_study
from coseg.model import DecoderSpec, EncoderSpec, parse_variant_name


@pytest.fixture
def small_study():
    """A 16x16x8 phantom study: big enough for the tiny models, cheap."""
    spec = PhantomSpec(
        dims=(16, 16, 8),
        spacing=Spacing(1.0, 1.0, 2.0),
        tumor_radii_mm=(5.0, 5.0, 5.0),
        necrosis_fraction=0.5,
        seed=11,
    )
    return generate_study(spec, "phantom_small")


def tiny_model_config(variant="E^{t1,t2}E^{pet}-D^{t2}D^{pet}"):
    """The full graph topology at toy channel widths for fast tests."""
    encoder_groups, decoder_groups = parse_variant_name(variant)
    encoders = tuple(
        EncoderSpec(input_modalities=mods, initial_filters=6, growths=(2, 2, 4, 4))
        for mods in encoder_groups
    )
    decoders = tuple(DecoderSpec(targets=mods) for mods in decoder_groups)
    return ModelConfig(encoders, decoders, variant_name="")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
