"""Dense encoder/decoder co-segmentation networks.

A model is described declaratively by a :class:`ModelConfig` (or a
variant-name string such as ``"E^{t1,t2}E^{pet}-D^{t2}D^{pet}"``) and
built into a :class:`CoSegNet`:

* one encoder branch per ``E^{...}`` group: an initial 3x3x3
  convolution with 48 filters followed by four dense blocks, each
  downsampled by max pooling -- 2x2x2 everywhere except 2x2x1 after
  the second block to respect the coarse z resolution;
* the bottleneck feature maps of all encoders are fused by channel
  concatenation and fed to every decoder;
* one decoder per ``D^{...}`` group mirrors the encoder: nearest
  upsampling, skip concatenation with the same-resolution encoder
  block, a 1x1x1 halving convolution, a dense block, and finally a
  1x1x1 head with sigmoid outputs (one channel per target, so a shared
  decoder ``D^{t2,pet}`` has two).

A dense block is three 3x3x3 convolutions with Swish activations;
layer i sees the block input concatenated with all previous layer
outputs, and the three layer outputs are concatenated and reduced by
0.5 with a 1x1x1 convolution.  No batch normalization and no dropout
anywhere (batch size is one).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .volume import Modality

DEFAULT_INITIAL_FILTERS = 48
DEFAULT_GROWTHS = (12, 28, 44, 60)
DEFAULT_POOLING = ((2, 2, 2), (2, 2, 1), (2, 2, 2), (2, 2, 2))
PROB_EPS = 1e-6

# The experiment matrix: every buildable encoder/decoder combination.
TABLE_VARIANTS = (
    "E^{t2}-D^{t2}",
    "E^{t1,t2}-D^{t2}",
    "E^{t1}E^{t2}-D^{t2}",
    "E^{pet}-D^{pet}",
    "E^{pet,ct}-D^{pet}",
    "E^{pet}E^{ct}-D^{pet}",
    "E^{t2}E^{pet}-D^{t2}D^{pet}",
    "E^{t2}E^{pet}-D^{t2,pet}",
    "E^{t1,t2}E^{pet}-D^{t2}D^{pet}",
    "E^{t1,t2}E^{pet}-D^{t2,pet}",
    "E^{t1,t2}E^{pet}-D^{t2}",
    "E^{t1,t2}E^{pet}-D^{pet}",
)


class ConfigError(ValueError):
    """Invalid model configuration."""


class ShapeDivisibilityError(ValueError):
    """Input spatial dims incompatible with the pooling schedule."""


def swish(x: torch.Tensor) -> torch.Tensor:
    """f(x) = x * sigmoid(x)."""
    return F.silu(x)


# ---------------------------------------------------------------------------
# Declarative specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseBlockSpec:
    growth: int
    n_layers: int = 3
    kernel: tuple[int, int, int] = (3, 3, 3)
    compression: float = 0.5

    def __post_init__(self):
        if self.growth < 1 or self.n_layers < 1:
            raise ConfigError("dense block needs positive growth and layer count")

    @property
    def out_channels(self) -> int:
        return int(self.n_layers * self.growth * self.compression)


@dataclass(frozen=True)
class EncoderSpec:
    input_modalities: tuple[Modality, ...]
    initial_filters: int = DEFAULT_INITIAL_FILTERS
    growths: tuple[int, ...] = DEFAULT_GROWTHS
    pooling: tuple[tuple[int, int, int], ...] = DEFAULT_POOLING

    def __post_init__(self):
        mods = tuple(Modality(m) for m in self.input_modalities)
        if not mods:
            raise ConfigError("encoder needs at least one input modality")
        object.__setattr__(self, "input_modalities", mods)
        object.__setattr__(self, "growths", tuple(int(g) for g in self.growths))
        pooling = tuple(tuple(int(p) for p in levels) for levels in self.pooling)
        if len(pooling) != len(self.growths):
            raise ConfigError("pooling schedule length must equal the number of levels")
        if any(p not in (1, 2) for levels in pooling for p in levels):
            raise ConfigError("pooling sizes must be 1 or 2 per axis")
        object.__setattr__(self, "pooling", pooling)

    @property
    def name(self) -> str:
        return ",".join(m.value.lower() for m in self.input_modalities)

    @property
    def levels(self) -> tuple[DenseBlockSpec, ...]:
        return tuple(DenseBlockSpec(g) for g in self.growths)

    @property
    def skip_channels(self) -> tuple[int, ...]:
        return tuple(spec.out_channels for spec in self.levels)


@dataclass(frozen=True)
class DecoderSpec:
    targets: tuple[Modality, ...]
    skip_fusion: str = ""  # "" = auto: concat if 1 target, multiply_except_first if shared

    def __post_init__(self):
        targets = tuple(Modality(t) for t in self.targets)
        if not targets or len(targets) > 2:
            raise ConfigError("decoder takes one target, or two for a shared decoder")
        object.__setattr__(self, "targets", targets)
        fusion = self.skip_fusion or (
            "multiply_except_first" if len(targets) == 2 else "concat"
        )
        if fusion not in ("concat", "multiply_except_first"):
            raise ConfigError(f"unknown skip fusion {fusion!r}")
        object.__setattr__(self, "skip_fusion", fusion)

    @property
    def shared(self) -> bool:
        return len(self.targets) == 2

    @property
    def head_channels(self) -> int:
        return len(self.targets)

    @property
    def name(self) -> str:
        return ",".join(t.value.lower() for t in self.targets)


_VARIANT_RE = re.compile(r"([ED])\^\{([a-z0-9, ]+)\}")


def parse_variant_name(name: str) -> tuple[list[tuple[str, ...]], list[tuple[str, ...]]]:
    """Split ``"E^{t1,t2}E^{pet}-D^{t2}D^{pet}"`` into encoder and decoder
    modality groups."""
    encoder_part, sep, decoder_part = name.partition("-")
    if not sep:
        raise ConfigError(f"variant name {name!r} lacks the encoder-decoder separator")

    def groups(text, kind):
        found = _VARIANT_RE.findall(text)
        if not found or any(k != kind for k, _ in found):
            raise ConfigError(f"cannot parse {kind} groups from {text!r}")
        leftover = _VARIANT_RE.sub("", text).strip()
        if leftover:
            raise ConfigError(f"unexpected text {leftover!r} in variant name {name!r}")
        return [tuple(m.strip().upper() for m in mods.split(",")) for _, mods in found]

    return groups(encoder_part, "E"), groups(decoder_part, "D")


@dataclass(frozen=True)
class ModelConfig:
    encoders: tuple[EncoderSpec, ...]
    decoders: tuple[DecoderSpec, ...]
    variant_name: str = ""

    def __post_init__(self):
        encoders = tuple(self.encoders)
        decoders = tuple(self.decoders)
        if not encoders or len(encoders) > 2:
            raise ConfigError("model takes one or two encoder branches")
        if not decoders or len(decoders) > 2:
            raise ConfigError("model takes one or two decoders")
        schedules = {e.pooling for e in encoders}
        if len(schedules) != 1:
            raise ConfigError("all encoders must share one pooling schedule")
        for decoder in decoders:
            for target in decoder.targets:
                if not any(target in e.input_modalities for e in encoders):
                    raise ConfigError(
                        f"decoder target {target.value} has no supplying encoder"
                    )
            if decoder.shared:
                supplying = {self._encoder_for(target, encoders) for target in decoder.targets}
                if len(encoders) != 2 or len(supplying) != 2:
                    raise ConfigError(
                        "a shared decoder fuses two encoder branches; "
                        "its targets must come from two distinct encoders"
                    )
                if len({(e.growths, e.initial_filters) for e in encoders}) != 1:
                    raise ConfigError(
                        "multiplicative skip fusion needs identically sized encoders"
                    )
        object.__setattr__(self, "encoders", encoders)
        object.__setattr__(self, "decoders", decoders)
        if not self.variant_name:
            object.__setattr__(self, "variant_name", self.canonical_name())

    @staticmethod
    def _encoder_for(target: Modality, encoders) -> int:
        for i, encoder in enumerate(encoders):
            if target in encoder.input_modalities:
                return i
        raise ConfigError(f"no encoder supplies {target.value}")

    def encoder_index_for(self, target: Modality) -> int:
        return self._encoder_for(target, self.encoders)

    def canonical_name(self) -> str:
        enc = "".join("E^{%s}" % e.name for e in self.encoders)
        dec = "".join("D^{%s}" % d.name for d in self.decoders)
        return f"{enc}-{dec}"

    @property
    def targets(self) -> tuple[Modality, ...]:
        seen = []
        for decoder in self.decoders:
            for target in decoder.targets:
                if target not in seen:
                    seen.append(target)
        return tuple(seen)

    @property
    def pooling(self) -> tuple[tuple[int, int, int], ...]:
        return self.encoders[0].pooling

    @property
    def patch_divisors(self) -> tuple[int, int, int]:
        """Per-axis factor every input spatial dim must divide by."""
        divisors = [1, 1, 1]
        for level in self.pooling:
            for axis in range(3):
                divisors[axis] *= level[axis]
        return tuple(divisors)

    # -- JSON ---------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "variant_name": self.variant_name,
            "encoders": [
                {
                    "input_modalities": [m.value for m in e.input_modalities],
                    "initial_filters": e.initial_filters,
                    "growths": list(e.growths),
                    "pooling": [list(p) for p in e.pooling],
                }
                for e in self.encoders
            ],
            "decoders": [
                {"targets": [t.value for t in d.targets], "skip_fusion": d.skip_fusion}
                for d in self.decoders
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        if "encoders" in doc:
            encoders = tuple(
                EncoderSpec(
                    input_modalities=tuple(e["input_modalities"]),
                    initial_filters=int(e.get("initial_filters", DEFAULT_INITIAL_FILTERS)),
                    growths=tuple(e.get("growths", DEFAULT_GROWTHS)),
                    pooling=tuple(tuple(p) for p in e.get("pooling", DEFAULT_POOLING)),
                )
                for e in doc["encoders"]
            )
            decoders = tuple(
                DecoderSpec(
                    targets=tuple(d["targets"]), skip_fusion=d.get("skip_fusion", "")
                )
                for d in doc["decoders"]
            )
            return cls(encoders, decoders, doc.get("variant_name", ""))
        if "variant_name" in doc:
            return cls.from_variant(doc["variant_name"])
        raise ConfigError("model config needs 'variant_name' or explicit encoders/decoders")

    @classmethod
    def from_variant(cls, name: str) -> "ModelConfig":
        encoder_groups, decoder_groups = parse_variant_name(name)
        encoders = tuple(EncoderSpec(input_modalities=mods) for mods in encoder_groups)
        decoders = tuple(DecoderSpec(targets=mods) for mods in decoder_groups)
        return cls(encoders, decoders, name)


# ---------------------------------------------------------------------------
# Network modules
# ---------------------------------------------------------------------------


class DenseBlock(nn.Module):
    """Three same-padded convolutions with Swish and dense connectivity,
    ending in a 1x1x1 halving of the concatenated layer outputs."""

    def __init__(self, in_channels: int, spec: DenseBlockSpec):
        super().__init__()
        pad = tuple(k // 2 for k in spec.kernel)
        self.convs = nn.ModuleList()
        channels = in_channels
        for _ in range(spec.n_layers):
            self.convs.append(nn.Conv3d(channels, spec.growth, spec.kernel, padding=pad))
            channels += spec.growth
        self.compress = nn.Conv3d(spec.n_layers * spec.growth, spec.out_channels, 1)
        self.out_channels = spec.out_channels

    def forward(self, x):
        features = [x]
        for conv in self.convs:
            features.append(swish(conv(torch.cat(features, dim=1))))
        return self.compress(torch.cat(features[1:], dim=1))


class EncoderBranch(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.initial = nn.Conv3d(len(spec.input_modalities), spec.initial_filters, 3, padding=1)
        self.blocks = nn.ModuleList()
        channels = spec.initial_filters
        for block_spec in spec.levels:
            block = DenseBlock(channels, block_spec)
            self.blocks.append(block)
            channels = block.out_channels
        self.out_channels = channels

    def forward(self, x):
        """Returns (skips, latent, pooled_shapes): the per-level block
        outputs before pooling, the pooled deepest feature map, and the
        post-pooling spatial shape of every level."""
        x = swish(self.initial(x))
        skips, pooled_shapes = [], []
        for block, pool in zip(self.blocks, self.spec.pooling):
            x = block(x)
            skips.append(x)
            x = F.max_pool3d(x, kernel_size=pool, stride=pool)
            pooled_shapes.append(tuple(x.shape[2:]))
        return skips, x, pooled_shapes


class DecoderLevel(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, growth: int, upsample):
        super().__init__()
        self.upsample = tuple(float(f) for f in upsample)
        concat = in_channels + skip_channels
        self.compress = nn.Conv3d(concat, concat // 2, 1)
        self.block = DenseBlock(concat // 2, DenseBlockSpec(growth))
        self.out_channels = self.block.out_channels

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=self.upsample, mode="nearest")
        x = self.compress(torch.cat([x, skip], dim=1))
        return self.block(x)


class DecoderBranch(nn.Module):
    """Mirrors the encoder from the fused bottleneck back to full
    resolution, consuming one skip tensor per level."""

    def __init__(self, spec: DecoderSpec, latent_channels: int, skip_channels, pooling, growths):
        super().__init__()
        self.spec = spec
        self.levels = nn.ModuleList()
        channels = latent_channels
        # deepest level first: upsample factors mirror the pooling schedule
        for level in reversed(range(len(growths))):
            stage = DecoderLevel(channels, skip_channels[level], growths[level], pooling[level])
            self.levels.append(stage)
            channels = stage.out_channels
        self.head = nn.Conv3d(channels, spec.head_channels, 1)

    def forward(self, latent, skips):
        x = latent
        for stage, skip in zip(self.levels, reversed(skips)):
            x = stage(x, skip)
        # float32 sigmoid saturates to exactly 0/1; keep probabilities
        # strictly inside the open interval
        return torch.sigmoid(self.head(x)).clamp(PROB_EPS, 1.0 - PROB_EPS)


class CoSegNet(nn.Module):
    """Static co-segmentation graph: one input tensor per encoder, one
    probability map per mask target.

    Forward is pure: with fixed weights, identical inputs give
    bit-identical outputs on the deterministic CPU path.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoders = nn.ModuleList(EncoderBranch(e) for e in config.encoders)
        latent_channels = sum(e.out_channels for e in self.encoders)
        growths = config.encoders[0].growths

        self.decoders = nn.ModuleList()
        self._decoder_sources = []
        for spec in config.decoders:
            if spec.shared:
                sources = tuple(config.encoder_index_for(t) for t in spec.targets)
                base = config.encoders[sources[0]].skip_channels
                # level 1 fuses by concatenation, deeper levels multiply
                skip_channels = (base[0] * 2, *base[1:])
            else:
                sources = (config.encoder_index_for(spec.targets[0]),)
                skip_channels = config.encoders[sources[0]].skip_channels
            self._decoder_sources.append(sources)
            self.decoders.append(
                DecoderBranch(spec, latent_channels, skip_channels, config.pooling, growths)
            )

    @property
    def encoder_names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.config.encoders)

    @property
    def target_names(self) -> tuple[str, ...]:
        return tuple(t.value for t in self.config.targets)

    def _gather_inputs(self, inputs):
        names = self.encoder_names
        if isinstance(inputs, dict):
            missing = [n for n in names if n not in inputs]
            if missing:
                raise ValueError(f"missing encoder inputs: {missing} (have {sorted(inputs)})")
            ordered = [inputs[n] for n in names]
        else:
            ordered = list(inputs)
            if len(ordered) != len(names):
                raise ValueError(f"expected {len(names)} encoder inputs, got {len(ordered)}")
        return ordered

    def _check_divisibility(self, spatial):
        for axis, (dim, factor) in enumerate(zip(spatial, self.config.patch_divisors)):
            if dim % factor:
                raise ShapeDivisibilityError(
                    f"axis {'xyz'[axis]}: size {dim} not divisible by the "
                    f"cumulative pooling factor {factor}"
                )

    def _fused_skips(self, spec, sources, all_skips):
        if not spec.shared:
            return all_skips[sources[0]]
        first, second = (all_skips[i] for i in sources)
        fused = [torch.cat([first[0], second[0]], dim=1)]
        fused += [a * b for a, b in zip(first[1:], second[1:])]
        return fused

    def forward(self, inputs, collect_shapes: bool = False):
        """Run the graph.

        ``inputs`` is a dict keyed by encoder name (see
        ``encoder_names``) or a sequence in encoder order; tensors are
        ``(channels, x, y, z)`` or batched ``(n, channels, x, y, z)``.
        Returns a dict mapping each target name ("T2"/"PET") to a
        single-channel probability tensor of the same spatial dims,
        with values strictly inside (0, 1).  With ``collect_shapes``
        also returns the per-encoder post-pooling spatial shapes.
        """
        ordered = self._gather_inputs(inputs)
        unbatched = ordered[0].dim() == 4
        if unbatched:
            ordered = [x.unsqueeze(0) for x in ordered]
        for tensor, encoder in zip(ordered, self.encoders):
            if tensor.shape[1] != len(encoder.spec.input_modalities):
                raise ValueError(
                    f"encoder {encoder.spec.name!r} expects "
                    f"{len(encoder.spec.input_modalities)} channels, got {tensor.shape[1]}"
                )
        self._check_divisibility(tuple(ordered[0].shape[2:]))

        all_skips, latents, shapes = [], [], []
        for tensor, encoder in zip(ordered, self.encoders):
            skips, latent, pooled_shapes = encoder(tensor)
            all_skips.append(skips)
            latents.append(latent)
            shapes.append(pooled_shapes)
        latent = torch.cat(latents, dim=1) if len(latents) > 1 else latents[0]

        outputs = {}
        for spec, sources, decoder in zip(
            self.config.decoders, self._decoder_sources, self.decoders
        ):
            skips = self._fused_skips(spec, sources, all_skips)
            probs = decoder(latent, skips)
            for channel, target in enumerate(spec.targets):
                out = probs[:, channel : channel + 1]
                outputs[target.value] = out.squeeze(0) if unbatched else out
        if collect_shapes:
            return outputs, shapes
        return outputs


def build_model(config: ModelConfig | str) -> CoSegNet:
    """Build the network for a config or a variant-name string."""
    if isinstance(config, str):
        config = ModelConfig.from_variant(config)
    return CoSegNet(config)


def count_parameters(model: nn.Module) -> int:
    """Exact count of trainable scalars (conv kernels + biases)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def init_weights(model: nn.Module, seed: int) -> None:
    """He-normal initialization, reproducible per seed.

    Every convolution kernel is drawn i.i.d. from N(0, 2/fan_in) with
    fan_in = kx*ky*kz*in_channels; biases are zeroed.
    """
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv3d):
                fan_in = module.in_channels * math.prod(module.kernel_size)
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                if module.bias is not None:
                    module.bias.zero_()


# ---------------------------------------------------------------------------
# Checkpoints: native state dict + JSON manifest
# ---------------------------------------------------------------------------


def save_checkpoint(model: CoSegNet, path, seed: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    manifest = {
        "variant_name": model.config.variant_name,
        "config": model.config.to_json(),
        "parameter_count": count_parameters(model),
        "seed": seed,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path) -> CoSegNet:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    model = CoSegNet(ModelConfig.from_json(manifest["config"]))
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model
