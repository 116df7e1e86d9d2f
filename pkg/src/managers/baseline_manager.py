"""
Baseline Manager Module

This module handles the comparison arms that do not use the self-cascade:
direct inference at the target resolution, and plain denoising-loss training
of either every base parameter (full fine-tuning, also used to pretrain the
base model) or only the low-rank adapters.
"""

from typing import Optional, Tuple

import numpy as np

from src.core import functional as F
from src.core.schedule import NoiseSchedule, forward_diffuse
from src.core.tensor import Graph, Tensor, backward, get_default_dtype
from src.managers.cascade_manager import Resolution, sample_base
from src.utils.error_handler import ShapeError


def direct_inference(model, resolution: Resolution, schedule: NoiseSchedule, c=None, seed: int = 0,
                     ddim_steps: int = 50, eta: float = 0.0, batch: int = 1, progress: bool = False) -> Tensor:
    """
    Sample straight at the requested resolution with the base weights

    At the base resolution this is the cascade's stage-0 sampler with the same
    seed streams, so both give identical images.

    Raises:
        ShapeError: When the resolution is not divisible by the UNet's downsampling factor
    """
    divisor = model.config.divisor
    if resolution[0] % divisor or resolution[1] % divisor:
        raise ShapeError(f"Resolution {tuple(resolution)} must be divisible by {divisor}")
    return sample_base(model, resolution, schedule, c, seed, ddim_steps, eta, batch, progress)


def denoising_loss(model, batch: Tuple[np.ndarray, Optional[np.ndarray]], s: NoiseSchedule,
                   rng: np.random.Generator, resolution: Optional[Resolution] = None) -> Tuple[Tensor, Graph]:
    """
    Standard noise-prediction loss with t uniform over 1..T

    Args:
        model: Denoiser or low-rank composite; its trainable parameters are recorded
        batch: (images, labels)
        s: Noise schedule
        rng: Source of timesteps and noise
        resolution: Expected (H, W) of the batch, if fixed

    Returns:
        (loss, graph) ready for backward()
    """
    x0, labels = batch
    x0 = np.asarray(x0)
    if x0.ndim != 4:
        raise ShapeError(f"Training batch must be (B, C, H, W), got {x0.shape}")
    if resolution is not None and tuple(x0.shape[2:]) != tuple(resolution):
        raise ShapeError(f"Training batch resolution {tuple(x0.shape[2:])} differs from {tuple(resolution)}")
    dtype = get_default_dtype()
    t = rng.integers(1, s.T + 1, size=x0.shape[0])
    eps = Tensor(rng.standard_normal(x0.shape), dtype=dtype)
    z_t = forward_diffuse(Tensor(x0, dtype=dtype), t, eps, s)
    c = None if labels is None else np.asarray(labels)

    with Graph(model.trainable_parameters()) as graph:
        loss = F.mse_loss(model.forward(z_t, t, c), eps)
    return loss, graph


def full_finetune_step(model, batch: Tuple[np.ndarray, Optional[np.ndarray]], s: NoiseSchedule,
                       rng: np.random.Generator, optimizer, resolution: Optional[Resolution] = None) -> float:
    """One update of every trainable parameter; returns the loss before the update"""
    loss, graph = denoising_loss(model, batch, s, rng, resolution)
    optimizer.step(backward(loss, graph))
    return loss.item()
