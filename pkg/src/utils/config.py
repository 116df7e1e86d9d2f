"""
Run Configuration

A run is fully described by one JSON document. Omitted fields take the pinned
defaults below; unknown fields and ill-typed values are rejected with a
ConfigError naming the first offending field. The config hash embedded in
every artifact is the SHA-256 of the canonical JSON of the fully defaulted
config.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from src.core.denoiser import UNetConfig
from src.core.upsampler import UpsamplerConfig
from src.utils.error_handler import CascadeError, ConfigError

CODE_VERSION = "1.0.0"


class ArmKind(Enum):
    BASE = "base"
    OURS_TF = "ours_tf"
    OURS_T = "ours_t"
    DIRECT = "direct"
    FULL_FT = "full_ft"
    LOWRANK = "lowrank"


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    T: int = 1000
    K: int = 700
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class CascadeConfig:
    base: Tuple[int, ...] = (32, 32)
    target: Tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch: int = 16
    steps: int = 2000
    seed: int = 0
    eval_every: int = 500
    log_every: int = 10
    checkpoint_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # std of gaussian noise added to training pivots, 0 disables
    pivot_noise_std: float = 0.0
    base_checkpoint: Optional[str] = None
    eval_samples: int = 64


@dataclass(frozen=True)
class DataConfig:
    corpus_seed: int = 1234
    n_train: int = 20000
    n_eval: int = 1000
    min_objects: int = 1
    max_objects: int = 4
    png_dir: Optional[str] = None
    cache_dir: Optional[str] = None


@dataclass(frozen=True)
class EvalConfig:
    extractor_seed: int = 20240521
    n_samples: int = 1000
    ddim_steps: int = 50
    eta: float = 0.0
    seed: int = 7
    # 0 means the base resolution height
    patch: int = 0
    n_patches: int = 4
    batch: int = 16


@dataclass(frozen=True)
class ArmConfig:
    name: str = "ours_t"
    rank: int = 4
    include: Tuple[str, ...] = ("*",)
    exclude: Tuple[str, ...] = ()

    @property
    def kind(self) -> ArmKind:
        return ArmKind(self.name)


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(num_classes=5))
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)
    output_dir: str = "runs/default"
    precision: str = "float32"
    model_seed: int = 0

    def unet_config(self) -> UNetConfig:
        """Denoiser config with its tap count tied to the upsampler level count"""
        return replace(self.unet, taps=self.upsampler.levels)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def with_overrides(self, **sections) -> "RunConfig":
        return replace(self, **sections)

    def validate(self) -> "RunConfig":
        """
        Check cross-field constraints

        Raises:
            ConfigError: Naming the first offending field
        """
        if self.schedule.kind not in ("linear", "cosine"):
            raise ConfigError("schedule.kind", f"must be 'linear' or 'cosine', got {self.schedule.kind!r}")
        if self.schedule.T < 2:
            raise ConfigError("schedule.T", f"must be >= 2, got {self.schedule.T}")
        if not 0 < self.schedule.K < self.schedule.T:
            raise ConfigError("schedule.K", f"must satisfy 0 < K < T={self.schedule.T}, got {self.schedule.K}")
        self.unet.validate()
        if self.unet.taps not in (0, self.upsampler.levels):
            raise ConfigError("unet.taps", "must be 0 or equal to upsampler.levels")
        if not 1 <= self.upsampler.levels <= self.unet.levels:
            raise ConfigError("upsampler.levels", f"must lie in [1, {self.unet.levels}]")
        if self.upsampler.factor != 2:
            raise ConfigError("upsampler.factor", "stage factor is fixed at 2")
        if self.upsampler.hidden_channels % self.upsampler.groupnorm_groups:
            raise ConfigError("upsampler.groupnorm_groups", "must divide upsampler.hidden_channels")
        if not 1 <= self.upsampler.t_probe <= self.schedule.T:
            raise ConfigError("upsampler.t_probe", f"must lie in [1, {self.schedule.T}]")
        for name in ("base", "target"):
            extent = getattr(self.cascade, name)
            if len(extent) != 2 or min(extent) < 8:
                raise ConfigError(f"cascade.{name}", f"must be [H, W] with both >= 8, got {list(extent)}")
        if self.train.lr <= 0:
            raise ConfigError("train.lr", "must be positive")
        if self.train.batch < 1:
            raise ConfigError("train.batch", "must be >= 1")
        if self.train.steps < 0:
            raise ConfigError("train.steps", "must be >= 0")
        for name in ("eval_every", "log_every", "checkpoint_every"):
            if getattr(self.train, name) < 1:
                raise ConfigError(f"train.{name}", "must be >= 1")
        if self.train.pivot_noise_std < 0:
            raise ConfigError("train.pivot_noise_std", "must be >= 0")
        if self.data.n_train < 1 or self.data.n_eval < 1:
            raise ConfigError("data.n_train", "n_train and n_eval must be >= 1")
        if not 1 <= self.data.min_objects <= self.data.max_objects:
            raise ConfigError("data.min_objects", "must satisfy 1 <= min_objects <= max_objects")
        if self.unet.num_classes and self.unet.num_classes <= self.data.max_objects:
            raise ConfigError("unet.num_classes", f"must exceed data.max_objects={self.data.max_objects}")
        if not 0.0 <= self.eval.eta <= 1.0:
            raise ConfigError("eval.eta", "must lie in [0, 1]")
        if self.eval.ddim_steps < 1:
            raise ConfigError("eval.ddim_steps", "must be >= 1")
        if self.eval.n_samples < 2:
            raise ConfigError("eval.n_samples", "must be >= 2")
        if self.eval.patch < 0 or self.eval.patch > min(self.cascade.target):
            raise ConfigError("eval.patch", f"must lie in [0, {min(self.cascade.target)}]")
        try:
            self.arm.kind
        except ValueError:
            choices = ", ".join(k.value for k in ArmKind)
            raise ConfigError("arm.name", f"must be one of {choices}, got {self.arm.name!r}") from None
        if self.arm.rank < 1:
            raise ConfigError("arm.rank", "must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", "must be 'float32' or 'float64'")
        return self

    @property
    def patch_size(self) -> int:
        return self.eval.patch or self.cascade.base[0]


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(default: Any, value: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(path, f"expected a string or null, got {value!r}")
        return value
    return value


def _build(instance: Any, data: Dict[str, Any], prefix: str = "") -> Any:
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    known = {f.name for f in fields(instance)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown field")
    updates = {}
    for f in fields(instance):
        if f.name not in data:
            continue
        default = getattr(instance, f.name)
        path = f"{prefix}{f.name}"
        if is_dataclass(default):
            updates[f.name] = _build(default, data[f.name], f"{path}.")
        else:
            updates[f.name] = _coerce(default, data[f.name], path)
    return replace(instance, **updates)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    try:
        config = _build(RunConfig(), data)
    except ConfigError:
        raise
    except (TypeError, CascadeError) as e:
        raise ConfigError("<root>", str(e)) from None
    return config.validate()


def parse_override(text: str) -> Tuple[List[str], Any]:
    """Split 'section.field=value'; the value is parsed as JSON when possible"""
    if "=" not in text:
        raise ConfigError(text, "override must have the form key.path=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(text, "override key is empty")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    result = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node = result
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(".".join(path), f"{part} is not a section")
            node = child
        node[path[-1]] = value
    return result


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                arm: Optional[str] = None) -> RunConfig:
    """
    Load a run config from JSON with CLI overrides applied

    Args:
        path: JSON file, or None for all defaults
        overrides: 'section.field=value' strings
        arm: Optional arm name overriding arm.name

    Returns:
        Validated RunConfig
    """
    data: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError("--config", f"file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("--config", f"invalid JSON in {path}: {e}") from None
    data = apply_overrides(data, overrides)
    if arm:
        data.setdefault("arm", {})["name"] = arm
    return config_from_dict(data)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_dict()).encode("utf-8")).hexdigest()


def save_config(config: RunConfig, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    temp_file = path + ".tmp"
    with open(temp_file, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(temp_file, path)


def provenance(config: RunConfig, **extra: Any) -> Dict[str, Any]:
    """Fields every artifact carries"""
    record = {"config_hash": config_hash(config), "code_version": CODE_VERSION}
    record.update(extra)
    return record
