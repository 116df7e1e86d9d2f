"""
Tiny UNet Noise Predictor

A fully convolutional UNet whose encoder skip tensors are exposed as a
FeatureGroup and can receive additive deltas before the decoder consumes
them. The same weights run at any resolution whose extents are divisible by
2^(levels - 1).
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core import functional as F
from src.core.layers import Conv2d, GroupNorm, Linear, Module, ResBlock
from src.core.tensor import Parameter, Tensor, get_default_dtype
from src.utils.error_handler import CascadeError, ConfigError, ScheduleError, ShapeError

Label = Union[None, int, Sequence[int], np.ndarray]


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    time_embed_dim: int = 128
    num_classes: int = 0
    groupnorm_groups: int = 8
    channel_mults: Tuple[int, ...] = (1, 2, 4, 4)
    # number of tapped skip levels, coarsest ones; 0 means every level
    taps: int = 0

    def validate(self) -> None:
        if not 2 <= self.levels <= 4:
            raise ConfigError("unet.levels", f"must lie in [2, 4], got {self.levels}")
        if len(self.channel_mults) < self.levels:
            raise ConfigError("unet.channel_mults", f"needs at least {self.levels} entries")
        if self.base_channels % 2:
            raise ConfigError("unet.base_channels", "must be even for the sinusoidal embedding")
        for level in range(self.levels):
            channels = self.level_channels(level)
            if channels % self.groupnorm_groups:
                raise ConfigError("unet.groupnorm_groups",
                                  f"{channels} channels at level {level} not divisible by {self.groupnorm_groups}")
        if self.blocks_per_level < 1:
            raise ConfigError("unet.blocks_per_level", "must be at least 1")
        if self.num_classes < 0:
            raise ConfigError("unet.num_classes", "must be >= 0")
        if not 0 <= self.taps <= self.levels:
            raise ConfigError("unet.taps", f"must lie in [0, {self.levels}], got {self.taps}")

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level]

    @property
    def tap_count(self) -> int:
        return self.taps or self.levels

    @property
    def tapped_levels(self) -> List[int]:
        return list(range(self.levels - self.tap_count, self.levels))

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class FeatureGroup:
    """Skip tensors ordered finest first, coarsest last"""

    features: List[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.features)

    def __getitem__(self, index: int) -> Tensor:
        return self.features[index]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [f.shape for f in self.features]


class EncoderLevel(Module):
    def __init__(self, in_channels: int, channels: int, config: UNetConfig, downsample: bool,
                 rng: np.random.Generator):
        self.blocks = []
        for index in range(config.blocks_per_level):
            self.blocks.append(ResBlock(in_channels if index == 0 else channels, channels,
                                        config.time_embed_dim, config.groupnorm_groups, rng))
        self.downsample = Conv2d(channels, channels, 3, stride=2, padding=1, rng=rng) if downsample else None


class DecoderLevel(Module):
    def __init__(self, channels: int, out_channels: Optional[int], config: UNetConfig, rng: np.random.Generator):
        self.blocks = []
        for index in range(config.blocks_per_level):
            self.blocks.append(ResBlock(2 * channels if index == 0 else channels, channels,
                                        config.time_embed_dim, config.groupnorm_groups, rng))
        self.upsample = Conv2d(channels, out_channels, 3, rng=rng) if out_channels else None


class TinyUNet(Module):
    """
    Noise predictor ε_θ(z_t, t, c)

    Args:
        config: Architecture configuration
        seed: Seed for weight initialization
        max_timestep: Schedule length T; timesteps above it are rejected. None leaves the upper end unchecked
    """

    def __init__(self, config: UNetConfig = UNetConfig(), seed: int = 0, max_timestep: Optional[int] = None):
        config.validate()
        self.config = config
        self.max_timestep = max_timestep
        rng = np.random.default_rng(seed)
        base, embed = config.base_channels, config.time_embed_dim

        self.time_mlp_in = Linear(base, embed, rng=rng)
        self.time_mlp_out = Linear(embed, embed, rng=rng)
        self.class_embed = None
        if config.num_classes > 0:
            self.class_embed = Parameter(rng.normal(0.0, 0.02, size=(config.num_classes, embed)),
                                         dtype=get_default_dtype())

        self.conv_in = Conv2d(config.in_channels, base, 3, rng=rng)
        self.encoder = []
        in_channels = base
        for level in range(config.levels):
            channels = config.level_channels(level)
            self.encoder.append(EncoderLevel(in_channels, channels, config,
                                             downsample=level < config.levels - 1, rng=rng))
            in_channels = channels

        deepest = config.level_channels(config.levels - 1)
        self.middle = ResBlock(deepest, deepest, embed, config.groupnorm_groups, rng)

        # decoder[i] serves encoder level i
        self.decoder = []
        for level in range(config.levels):
            out_channels = config.level_channels(level - 1) if level > 0 else None
            self.decoder.append(DecoderLevel(config.level_channels(level), out_channels, config, rng))

        self.out_norm = GroupNorm(config.groupnorm_groups, base)
        self.conv_out = Conv2d(base, config.in_channels, 3, rng=rng)

    @property
    def tap_count(self) -> int:
        return self.config.tap_count

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Parameter]]]:
        return {"base": list(self.named_parameters())}

    def skip_shapes(self, batch: int, height: int, width: int) -> List[Tuple[int, int, int, int]]:
        """Shapes of the tapped skip tensors for a given input size"""
        shapes = []
        for level in self.config.tapped_levels:
            scale = 2 ** level
            shapes.append((batch, self.config.level_channels(level), height // scale, width // scale))
        return shapes

    def _check_input(self, z_t: Tensor) -> None:
        if z_t.ndim != 4 or z_t.shape[1] != self.config.in_channels:
            raise ShapeError(f"denoise expects (B, {self.config.in_channels}, H, W), got {z_t.shape}")
        divisor = self.config.divisor
        height, width = z_t.shape[2:]
        if height % divisor or width % divisor:
            raise ShapeError(f"Spatial extents {(height, width)} must be divisible by {divisor} "
                             f"(2^(levels-1) with levels={self.config.levels})")

    def embed(self, t, c: Label, batch: int, dtype) -> Tensor:
        steps = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        upper = self.max_timestep
        if np.any(steps < 0) or (upper is not None and np.any(steps > upper)):
            bound = "T" if upper is None else upper
            raise ScheduleError(f"Timesteps must lie in [0, {bound}], got range [{steps.min()}, {steps.max()}]")
        t_tensor = Tensor(steps, dtype=dtype)
        embedding = F.timestep_embedding(t_tensor, self.config.base_channels)
        embedding = self.time_mlp_out(F.silu(self.time_mlp_in(embedding)))
        if c is not None:
            if self.class_embed is None:
                raise CascadeError("Class label given to an unconditional denoiser (num_classes=0)")
            labels = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,))
            embedding = F.add(embedding, F.take_rows(self.class_embed, labels))
        return embedding

    def denoise(self, z_t: Tensor, t, c: Label = None,
                inject: Optional[FeatureGroup] = None) -> Tuple[Tensor, FeatureGroup]:
        """
        Predict the noise in z_t

        Args:
            z_t: Noisy latent (B, C, H, W)
            t: Timestep, scalar or one per sample
            c: Class label(s) or None
            inject: Deltas added to the tapped skips before the decoder reads them

        Returns:
            (eps_pred, skips) where skips are the tapped encoder tensors before injection
        """
        self._check_input(z_t)
        batch = z_t.shape[0]
        embedding = self.embed(t, c, batch, z_t.dtype)

        skips = []
        h = self.conv_in(z_t)
        for level in self.encoder:
            for block in level.blocks:
                h = block(h, embedding)
            skips.append(h)
            if level.downsample is not None:
                h = level.downsample(h)

        tapped = self.config.tapped_levels
        group = FeatureGroup([skips[level] for level in tapped])
        if inject is not None:
            if len(inject) != len(tapped):
                raise ShapeError(f"Injection has {len(inject)} levels, denoiser taps {len(tapped)}")
            skips = list(skips)
            for level, delta in zip(tapped, inject):
                if delta.shape != skips[level].shape:
                    raise ShapeError(f"Injection delta {delta.shape} does not match skip level {level} "
                                     f"of shape {skips[level].shape}")
                skips[level] = F.add(skips[level], delta)

        h = self.middle(h, embedding)
        for level in reversed(range(self.config.levels)):
            decoder = self.decoder[level]
            h = F.concat([h, skips[level]], axis=1)
            for block in decoder.blocks:
                h = block(h, embedding)
            if decoder.upsample is not None:
                h = decoder.upsample(F.bilinear_upsample(h, 2))

        eps_pred = self.conv_out(F.silu(self.out_norm(h)))
        return eps_pred, group

    def forward(self, z_t: Tensor, t, c: Label = None, inject: Optional[FeatureGroup] = None) -> Tensor:
        return self.denoise(z_t, t, c, inject)[0]


def extract_pivot_features(model, z0_prev: Tensor, t_probe: int = 1, c: Label = None) -> FeatureGroup:
    """Run the denoiser over a clean pivot and keep only its skip features"""
    _, skips = model.denoise(z0_prev, t_probe, c, None)
    return skips


def parameter_census(model) -> Dict[str, object]:
    """
    Exact parameter counts of a denoiser or composite

    Returns:
        {"total": int, "trainable": int, "per_group": {group: count}}
    """
    per_group = {}
    total = trainable = 0
    for group, params in model.parameter_groups().items():
        count = int(sum(p.size for _, p in params))
        per_group[group] = count
        total += count
        trainable += int(sum(p.size for _, p in params if p.trainable))
    return {"total": total, "trainable": trainable, "per_group": per_group}
