"""
Time-Aware Feature Upsamplers

Each FeatureUpsampler maps one pivot skip tensor from the previous cascade
stage to an additive delta for the same skip level at the current stage:
bilinear upsampling, two residual blocks conditioned on the timestep, and a
zero-initialized 3x3 output conv so a fresh stack contributes nothing.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core import functional as F
from src.core.denoiser import FeatureGroup, TinyUNet
from src.core.layers import Conv2d, Module, ResBlock
from src.core.tensor import Parameter, Tensor
from src.utils.error_handler import ShapeError


@dataclass(frozen=True)
class UpsamplerConfig:
    levels: int = 3
    hidden_channels: int = 4
    time_embed_dim: int = 16
    groupnorm_groups: int = 4
    factor: int = 2
    t_probe: int = 1


class FeatureUpsampler(Module):
    def __init__(self, channels: int, config: UpsamplerConfig, rng: np.random.Generator):
        hidden = config.hidden_channels
        self.block1 = ResBlock(channels, hidden, config.time_embed_dim, config.groupnorm_groups, rng)
        self.block2 = ResBlock(hidden, hidden, config.time_embed_dim, config.groupnorm_groups, rng)
        self.proj_out = Conv2d(hidden, channels, 3, rng=rng, zero_init=True)
        self.factor = config.factor

    def forward(self, h: Tensor, embedding: Tensor, factor: Optional[F.Factor] = None) -> Tensor:
        x = F.bilinear_upsample(h, self.factor if factor is None else factor)
        x = self.block1(x, embedding)
        x = self.block2(x, embedding)
        return self.proj_out(F.silu(x))


class UpsamplerStack(Module):
    """
    One FeatureUpsampler per tapped skip level of a denoiser

    Args:
        channels: Channel count of each tapped level, finest first
        config: Upsampler configuration
        seed: Initialization seed
    """

    def __init__(self, channels: Sequence[int], config: UpsamplerConfig = UpsamplerConfig(), seed: int = 0):
        if len(channels) != config.levels:
            raise ShapeError(f"UpsamplerStack configured for {config.levels} levels but given "
                             f"{len(channels)} channel counts")
        rng = np.random.default_rng(seed)
        self.config = config
        self.upsamplers = [FeatureUpsampler(c, config, rng) for c in channels]

    @classmethod
    def for_model(cls, model: TinyUNet, config: UpsamplerConfig = UpsamplerConfig(),
                  seed: int = 0) -> "UpsamplerStack":
        channels = [model.config.level_channels(level) for level in model.config.tapped_levels]
        return cls(channels, config, seed)

    def __len__(self) -> int:
        return len(self.upsamplers)

    def time_embedding(self, t, batch: int, dtype) -> Tensor:
        steps = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        return F.timestep_embedding(Tensor(steps, dtype=dtype), self.config.time_embed_dim)

    def apply(self, pivot: FeatureGroup, t, factor: Optional[F.Factor] = None) -> FeatureGroup:
        """
        Deltas for the current stage's skips from the previous stage's pivot features

        Args:
            pivot: Skip features of the clean previous-stage output
            t: Current timestep, scalar or one per sample
            factor: Per-axis stage factor; defaults to config.factor on both axes
        """
        if len(pivot) != len(self.upsamplers):
            raise ShapeError(f"Pivot has {len(pivot)} feature levels, stack has {len(self.upsamplers)}")
        first = pivot[0]
        embedding = self.time_embedding(t, first.shape[0], first.dtype)
        deltas = []
        for upsampler, feature in zip(self.upsamplers, pivot):
            deltas.append(upsampler(feature, embedding, factor))
        return FeatureGroup(deltas)


def apply(stack: UpsamplerStack, pivot: FeatureGroup, t, factor: Optional[F.Factor] = None) -> FeatureGroup:
    return stack.apply(pivot, t, factor)


class UpsampledDenoiser(Module):
    """
    Frozen base denoiser with a trainable upsampler stack plugged into its skips

    The stack is consulted on every denoise call that receives pivot features;
    without them the composite behaves like the bare base model.
    """

    def __init__(self, model: TinyUNet, stack: UpsamplerStack, stage: int = 1,
                 resolution: Optional[Tuple[int, int]] = None, factor: Optional[F.Factor] = None):
        self.model = model
        self.stack = stack
        self.stage = stage
        self.resolution = resolution
        self.factor = factor

    @property
    def config(self):
        return self.model.config

    @property
    def group_name(self) -> str:
        return f"upsampler_stage_{self.stage}"

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Parameter]]]:
        return {
            "base": list(self.model.named_parameters()),
            self.group_name: list(self.stack.named_parameters()),
        }

    def denoise(self, z_t: Tensor, t, c=None, pivot_features: Optional[FeatureGroup] = None):
        deltas = None if pivot_features is None else self.stack.apply(pivot_features, t, self.factor)
        return self.model.denoise(z_t, t, c, inject=deltas)

    def forward(self, z_t: Tensor, t, c=None, pivot_features: Optional[FeatureGroup] = None) -> Tensor:
        return self.denoise(z_t, t, c, pivot_features)[0]


def freeze_base_attach(model: TinyUNet, stack: UpsamplerStack, stage: int = 1,
                       resolution: Optional[Tuple[int, int]] = None,
                       factor: Optional[F.Factor] = None) -> UpsampledDenoiser:
    """
    Freeze every base parameter and plug the stack into the denoiser's skips

    Raises:
        ShapeError: When the stack level count differs from the model tap count
    """
    if len(stack) != model.tap_count:
        raise ShapeError(f"Stack has {len(stack)} levels but the denoiser taps {model.tap_count}")
    model.freeze()
    stack.unfreeze()
    return UpsampledDenoiser(model, stack, stage=stage, resolution=resolution, factor=factor)
