"""
Noise Schedules and DDIM Sampling Steps

Timesteps are 1-indexed: t=0 is the clean state, t=T the noisiest. ᾱ values
are computed and stored in float64; tensor arithmetic keeps the dtype of the
input tensors.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.core import functional as F
from src.core.tensor import Tensor
from src.utils.error_handler import ScheduleError, ShapeError

Timestep = Union[int, np.ndarray, Sequence[int]]


class ScheduleKind(Enum):
    LINEAR = "linear"
    COSINE = "cosine"


def linear_beta_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> np.ndarray:
    return np.linspace(beta_start, beta_end, T, dtype=np.float64)


def cosine_beta_schedule(T: int, s: float = 0.008) -> np.ndarray:
    x = np.linspace(0, T, T + 1, dtype=np.float64)
    alphas_cumprod = np.cos(((x / T) + s) / (1 + s) * np.pi * 0.5) ** 2
    alphas_cumprod = alphas_cumprod / alphas_cumprod[0]
    betas = 1 - (alphas_cumprod[1:] / alphas_cumprod[:-1])
    return np.clip(betas, 0.0001, 0.9999)


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable schedule; betas[i] and alpha_bars[i] belong to timestep i + 1"""

    kind: ScheduleKind
    T: int
    K: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t with ᾱ_0 = 1"""
        t = int(t)
        if t < 0 or t > self.T:
            raise ScheduleError(f"Timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha_bars_at(self, t: Timestep) -> np.ndarray:
        steps = np.asarray(t, dtype=np.int64)
        if steps.size and (steps.min() < 1 or steps.max() > self.T):
            raise ScheduleError(f"Timesteps must lie in [1, {self.T}], got range "
                                f"[{steps.min()}, {steps.max()}]")
        return self.alpha_bars[steps - 1]

    def validate(self) -> None:
        if self.T < 2:
            raise ScheduleError(f"T must be at least 2, got {self.T}")
        if not 0 < self.K < self.T:
            raise ScheduleError(f"Pivot step K must satisfy 0 < K < T, got K={self.K}, T={self.T}")
        if self.betas.shape != (self.T,) or self.alpha_bars.shape != (self.T,):
            raise ScheduleError(f"Schedule arrays must have length T={self.T}")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ScheduleError("Every beta must lie strictly between 0 and 1")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")


def make_schedule(kind: Union[ScheduleKind, str] = ScheduleKind.LINEAR, T: int = 1000, K: int = 700,
                  beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """
    Build a validated noise schedule

    Args:
        kind: linear or cosine beta schedule
        T: Number of training timesteps
        K: Pivot step where later cascade stages start
        beta_start: First beta of the linear schedule
        beta_end: Last beta of the linear schedule

    Returns:
        NoiseSchedule satisfying all invariants
    """
    kind = ScheduleKind(kind)
    if T < 2:
        raise ScheduleError(f"T must be at least 2, got {T}")
    if not 0 < K < T:
        raise ScheduleError(f"Pivot step K must satisfy 0 < K < T, got K={K}, T={T}")
    if kind is ScheduleKind.LINEAR:
        betas = linear_beta_schedule(T, beta_start, beta_end)
    else:
        betas = cosine_beta_schedule(T)
    alpha_bars = np.cumprod(1.0 - betas)
    schedule = NoiseSchedule(kind=kind, T=T, K=K, betas=betas, alpha_bars=alpha_bars)
    schedule.validate()
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return schedule


def _coefficient(values: np.ndarray, batch: int, dtype) -> np.ndarray:
    """Broadcast per-sample coefficients to (B, 1, 1, 1)"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values.astype(dtype)
    if values.shape != (batch,):
        raise ShapeError(f"Per-sample timesteps must have shape ({batch},), got {values.shape}")
    return values.reshape(batch, 1, 1, 1).astype(dtype)


def forward_diffuse(z0: Tensor, t: Timestep, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps; t may be a scalar or one step per sample"""
    if z0.shape != eps.shape:
        raise ShapeError(f"forward_diffuse: z0 {z0.shape} and eps {eps.shape} differ")
    alpha_bar = s.alpha_bars_at(t)
    signal = _coefficient(np.sqrt(alpha_bar), z0.shape[0], z0.dtype)
    noise = _coefficient(np.sqrt(1.0 - alpha_bar), z0.shape[0], z0.dtype)
    return Tensor._from_result(signal * z0.data + noise * eps.data, "forward_diffuse")


@dataclass(frozen=True)
class DdimPlan:
    start_step: int
    step_indices: Tuple[int, ...]
    eta: float = 0.0

    def __len__(self) -> int:
        return len(self.step_indices)

    def transitions(self):
        """Yield (t, t_prev) pairs ending with a step to the clean state"""
        indices = self.step_indices
        for i, t in enumerate(indices):
            yield t, indices[i + 1] if i + 1 < len(indices) else 0


def make_ddim_plan(start_step: int, steps: int, eta: float = 0.0) -> DdimPlan:
    """Uniformly spaced strictly decreasing steps from start_step down to 1"""
    if start_step < 1:
        raise ScheduleError(f"start_step must be >= 1, got {start_step}")
    if steps < 1:
        raise ScheduleError(f"DDIM plan needs at least one step, got {steps}")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    steps = min(steps, start_step)
    if steps == 1:
        indices = (start_step,)
    else:
        # floor(x + 0.5) is monotone, so spacing >= 1 keeps the indices distinct
        grid = np.floor(np.linspace(start_step, 1, steps) + 0.5).astype(np.int64)
        indices = tuple(int(i) for i in grid)
    if any(b >= a for a, b in zip(indices, indices[1:])):
        raise ScheduleError(f"DDIM plan is not strictly decreasing: {indices}")
    return DdimPlan(start_step=start_step, step_indices=indices, eta=float(eta))


def ddim_step(z_t: Tensor, eps_pred: Tensor, t: int, t_prev: int, s: NoiseSchedule,
              eta: float = 0.0, noise: Optional[Tensor] = None) -> Tensor:
    """
    One DDIM update from t to t_prev

    Args:
        z_t: Current latent
        eps_pred: Predicted noise at t
        t: Current step (1..T)
        t_prev: Target step, 0 for the clean state
        s: Noise schedule
        eta: Stochasticity; 0 gives the deterministic map
        noise: Standard normal tensor, required when eta > 0

    Returns:
        Latent at t_prev
    """
    if t_prev >= t:
        raise ScheduleError(f"ddim_step requires t_prev < t, got t={t}, t_prev={t_prev}")
    if t_prev < 0 or t > s.T:
        raise ScheduleError(f"ddim_step steps must lie in [0, {s.T}], got t={t}, t_prev={t_prev}")
    if z_t.shape != eps_pred.shape:
        raise ShapeError(f"ddim_step: z_t {z_t.shape} and eps_pred {eps_pred.shape} differ")
    if eta == 0.0 and noise is not None:
        raise ScheduleError("ddim_step with eta=0 takes no noise input")
    if eta > 0.0 and (noise is None or noise.shape != z_t.shape):
        raise ScheduleError("ddim_step with eta > 0 needs a noise tensor shaped like z_t")

    a_t = s.alpha_bar(t)
    a_prev = s.alpha_bar(t_prev)
    sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
    dtype = z_t.dtype.type

    z0_pred = (z_t.data - dtype(np.sqrt(1.0 - a_t)) * eps_pred.data) / dtype(np.sqrt(a_t))
    direction = dtype(np.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0))) * eps_pred.data
    z_prev = dtype(np.sqrt(a_prev)) * z0_pred + direction
    if sigma > 0:
        z_prev = z_prev + dtype(sigma) * noise.data
    return Tensor._from_result(z_prev, "ddim_step")


def pivot_replace(z0_prev: Tensor, s: NoiseSchedule, factor: Union[int, Tuple[int, int]], rng_seed: int,
                  target_shape: Optional[Tuple[int, ...]] = None, k: Optional[int] = None) -> Tensor:
    """
    Upsample a clean stage output and diffuse it to the pivot step

    Returns √ᾱ_K·up(z0_prev) + √(1−ᾱ_K)·ε with ε ~ N(0, I) drawn from rng_seed.
    The noise term scales the variance by (1 − ᾱ_K), matching forward_diffuse.
    """
    k = s.K if k is None else int(k)
    upsampled = F.bilinear_upsample(z0_prev, factor)
    if target_shape is not None and tuple(target_shape) != upsampled.shape:
        raise ShapeError(f"pivot_replace: upsampling {z0_prev.shape} by {factor} gives {upsampled.shape}, "
                         f"stage expects {tuple(target_shape)}")
    rng = np.random.default_rng(rng_seed)
    eps = Tensor(rng.standard_normal(upsampled.shape), dtype=upsampled.dtype)
    return forward_diffuse(upsampled, k, eps, s)
