"""
Low-rank weight adapters for the comparison arm.

A LowRankAdapter holds factors A (out x r) and B (r x in_flat) and adds
(A @ B) / r to a frozen conv or linear weight. B starts at zero, so an
attached adapter leaves the model's outputs unchanged until trained.
"""

from fnmatch import fnmatch
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core import functional as F
from src.core.denoiser import TinyUNet
from src.core.layers import Conv2d, Linear, Module, ParameterSet
from src.core.tensor import Parameter, Tensor, get_default_dtype
from src.utils.error_handler import ConfigError


class LowRankAdapter(Module):
    def __init__(self, weight_shape: Tuple[int, ...], rank: int, rng: np.random.Generator):
        out_features = weight_shape[0]
        in_features = int(np.prod(weight_shape[1:]))
        dtype = get_default_dtype()
        self.lora_a = Parameter(rng.normal(0.0, 1.0 / rank, size=(out_features, rank)), dtype=dtype)
        self.lora_b = Parameter(np.zeros((rank, in_features)), dtype=dtype)
        self.rank = rank
        self.weight_shape = tuple(weight_shape)

    def forward(self, weight: Tensor) -> Tensor:
        delta = F.scale(F.matmul(self.lora_a, self.lora_b), 1.0 / self.rank)
        return F.add(weight, F.reshape(delta, self.weight_shape))


def layer_dimensions(layer) -> Tuple[int, int]:
    """(in_flat, out) for a conv or linear weight"""
    shape = layer.weight.shape
    return int(np.prod(shape[1:])), shape[0]


class LowRankComposite(Module):
    """Frozen denoiser with adapters attached to a filtered set of layers"""

    def __init__(self, model: TinyUNet, adapters: Dict[str, LowRankAdapter], rank: int):
        self.model = model
        self.rank = rank
        self._adapters = adapters

    @property
    def config(self):
        return self.model.config

    @property
    def adapters(self) -> Dict[str, LowRankAdapter]:
        return dict(self._adapters)

    @property
    def tap_count(self) -> int:
        return self.model.tap_count

    def adapter_parameters(self) -> List[Tuple[str, Parameter]]:
        named = []
        for layer_name, adapter in self._adapters.items():
            named.extend((f"{layer_name}.{name}", p) for name, p in adapter.named_parameters())
        return named

    def adapter_set(self) -> ParameterSet:
        return ParameterSet(self.adapter_parameters())

    def named_parameters(self, prefix: str = ""):
        yield from self.model.named_parameters(f"{prefix}model.")
        for name, param in self.adapter_parameters():
            yield f"{prefix}adapters.{name}", param

    def parameter_groups(self):
        return {"base": list(self.model.named_parameters()), "adapter": self.adapter_parameters()}

    def denoise(self, z_t: Tensor, t, c=None, inject=None):
        return self.model.denoise(z_t, t, c, inject)

    def forward(self, z_t: Tensor, t, c=None) -> Tensor:
        return self.denoise(z_t, t, c)[0]

    def detach(self) -> None:
        """Remove every adapter hook from the base layers"""
        for name, module in self.model.named_modules():
            if name in self._adapters:
                module._adapter = None


def attach_lowrank(model: TinyUNet, rank: int, include: Sequence[str] = ("*",),
                   exclude: Sequence[str] = (), seed: int = 0) -> LowRankComposite:
    """
    Freeze the model and attach rank-r adapters to every matching conv/linear layer

    Args:
        model: Base denoiser
        rank: Adapter rank
        include: fnmatch patterns over layer names that select layers
        exclude: fnmatch patterns removed from the selection
        seed: Seed for the A factors

    Raises:
        ConfigError: When rank < 1 or exceeds min(in, out) of a selected layer
    """
    if rank < 1:
        raise ConfigError("arm.rank", f"must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    selected = []
    for name, module in model.named_modules():
        if not isinstance(module, (Conv2d, Linear)):
            continue
        if not any(fnmatch(name, pattern) for pattern in include):
            continue
        if any(fnmatch(name, pattern) for pattern in exclude):
            continue
        in_flat, out = layer_dimensions(module)
        if rank > min(in_flat, out):
            raise ConfigError("arm.rank", f"rank {rank} exceeds min(in={in_flat}, out={out}) of layer {name}")
        selected.append((name, module))

    model.freeze()
    adapters = {}
    for name, module in selected:
        adapter = LowRankAdapter(module.weight.shape, rank, rng)
        module._adapter = adapter
        adapters[name] = adapter
    return LowRankComposite(model, adapters, rank)


def lowrank_parameter_count(model: TinyUNet, rank: int, include: Sequence[str] = ("*",),
                            exclude: Sequence[str] = ()) -> int:
    """Closed-form Σ r·(in + out) over the layers attach_lowrank would adapt"""
    total = 0
    for name, module in model.named_modules():
        if isinstance(module, (Conv2d, Linear)) and any(fnmatch(name, p) for p in include) \
                and not any(fnmatch(name, p) for p in exclude):
            in_flat, out = layer_dimensions(module)
            total += rank * (in_flat + out)
    return total
