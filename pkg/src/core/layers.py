"""
Neural network building blocks

Module discovers Parameters and sub-Modules from its public attributes
(lists of modules included) and gives them dotted names such as
"encoder.0.blocks.1.conv1.weight". Attributes starting with an underscore are
not traversed, which is how low-rank adapters stay out of the base state.
"""

from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.core import functional as F
from src.core.tensor import Parameter, Tensor, get_default_dtype
from src.utils.error_handler import CheckpointError, ShapeError


class Module:
    """Base class for parameterised components"""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{index}", item
            elif isinstance(value, (Module, Parameter)):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
            else:
                yield from value.named_parameters(f"{prefix}{key}.")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.trainable = True

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy arrays into matching parameters

        Raises:
            CheckpointError: On a missing tensor (strict) or any shape mismatch
        """
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing:
                raise CheckpointError(f"Checkpoint is missing tensor {missing[0]}", missing[0])
            if unexpected:
                raise CheckpointError(f"Checkpoint has unexpected tensor {unexpected[0]}", unexpected[0])
        for name, array in state.items():
            param = own.get(name)
            if param is None:
                continue
            if tuple(array.shape) != param.shape:
                raise CheckpointError(
                    f"Tensor {name} has shape {tuple(array.shape)} in checkpoint but {param.shape} in model",
                    name)
            param.assign(array)


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Square-kernel convolution with an optional low-rank weight delta"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                 zero_init: bool = False):
        rng = rng or np.random.default_rng(0)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        dtype = get_default_dtype()
        if zero_init:
            self.weight = Parameter(np.zeros(shape), dtype=dtype)
            self.bias = Parameter(np.zeros(out_channels), dtype=dtype)
        else:
            self.weight = Parameter(_uniform(rng, shape, fan_in), dtype=dtype)
            self.bias = Parameter(_uniform(rng, (out_channels,), fan_in), dtype=dtype)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self._adapter: Optional[Callable[[Tensor], Tensor]] = None

    def effective_weight(self) -> Tensor:
        if self._adapter is None:
            return self.weight
        return self._adapter(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.effective_weight(), self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 zero_init: bool = False):
        rng = rng or np.random.default_rng(0)
        dtype = get_default_dtype()
        if zero_init:
            self.weight = Parameter(np.zeros((out_features, in_features)), dtype=dtype)
            self.bias = Parameter(np.zeros(out_features), dtype=dtype)
        else:
            self.weight = Parameter(_uniform(rng, (out_features, in_features), in_features), dtype=dtype)
            self.bias = Parameter(_uniform(rng, (out_features,), in_features), dtype=dtype)
        self.in_features = in_features
        self.out_features = out_features
        self._adapter: Optional[Callable[[Tensor], Tensor]] = None

    def effective_weight(self) -> Tensor:
        if self._adapter is None:
            return self.weight
        return self._adapter(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.effective_weight(), self.bias)


class GroupNorm(Module):
    def __init__(self, num_groups: int, channels: int, eps: float = 1e-5):
        if channels % num_groups != 0:
            raise ShapeError(f"GroupNorm: {channels} channels not divisible into {num_groups} groups")
        dtype = get_default_dtype()
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.num_groups = num_groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.num_groups, self.gamma, self.beta, self.eps)


class ResBlock(Module):
    """
    Residual block conditioned on a time embedding

    GroupNorm -> SiLU -> conv3x3, then GroupNorm modulated by
    (1 + scale, shift) from the embedding, SiLU -> conv3x3, plus a
    1x1 skip projection when the channel count changes.
    """

    def __init__(self, in_channels: int, out_channels: int, embed_dim: int, groups: int,
                 rng: np.random.Generator):
        self.norm1 = GroupNorm(groups, in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng=rng)
        self.time_proj = Linear(embed_dim, 2 * out_channels, rng=rng)
        self.norm2 = GroupNorm(groups, out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng)
        self.skip = Conv2d(in_channels, out_channels, 1, rng=rng) if in_channels != out_channels else None
        self.out_channels = out_channels

    def forward(self, x: Tensor, embedding: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        modulation = self.time_proj(F.silu(embedding))
        modulation = F.reshape(modulation, (modulation.shape[0], 2 * self.out_channels, 1, 1))
        scale = F.channel_slice(modulation, 0, self.out_channels)
        shift = F.channel_slice(modulation, self.out_channels, self.out_channels)
        h = F.add(F.mul(self.norm2(h), F.add(scale, 1.0)), shift)
        h = self.conv2(F.silu(h))
        residual = x if self.skip is None else self.skip(x)
        return F.add(residual, h)


class ParameterSet(Module):
    """A flat named collection of parameters owned elsewhere"""

    def __init__(self, named: List[Tuple[str, Parameter]]):
        self._named = list(named)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._named:
            yield f"{prefix}{name}", param
