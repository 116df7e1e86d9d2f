"""
Cascade Manager Module

This module handles scale decomposition of a resolution jump into 4x-pixel
stages, staged sampling with pivot replacement (tuning-free, or with the
trained feature upsamplers injected), and the upsampler tuning step.
"""

import sys
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.core import functional as F
from src.core.denoiser import FeatureGroup, TinyUNet, extract_pivot_features
from src.core.schedule import DdimPlan, NoiseSchedule, ddim_step, forward_diffuse, make_ddim_plan, pivot_replace
from src.core.tensor import Graph, Tensor, backward, get_default_dtype
from src.core.upsampler import UpsampledDenoiser, UpsamplerStack
from src.utils.error_handler import CascadeError, PlanError, ShapeError

Resolution = Tuple[int, int]
DenoiseFn = Callable[[Tensor, int], Tensor]

# seed streams per stage
INIT_STREAM = 0
NOISE_STREAM = 1


class StageMode(Enum):
    TUNING_FREE = "tuning_free"
    TUNED = "tuned"


def _doublings(ratio: int, axis: str) -> int:
    if ratio < 1 or ratio & (ratio - 1):
        raise PlanError(f"{axis} scale factor {ratio} is not a power of two")
    return ratio.bit_length() - 1


@dataclass(frozen=True)
class CascadePlan:
    base: Resolution
    target: Resolution
    stages: Tuple[Resolution, ...]

    @property
    def R(self) -> int:
        return len(self.stages) - 1

    def factor(self, stage: int) -> Tuple[int, int]:
        """Per-axis upsampling factor from stage - 1 to stage"""
        if not 1 <= stage <= self.R:
            raise PlanError(f"Stage {stage} has no predecessor in a plan with R={self.R}")
        (h0, w0), (h1, w1) = self.stages[stage - 1], self.stages[stage]
        return h1 // h0, w1 // w0

    def to_dict(self) -> Dict:
        return {
            "base": list(self.base),
            "target": list(self.target),
            "R": self.R,
            "stages": [list(stage) for stage in self.stages],
            "factors": [list(self.factor(r)) for r in range(1, self.R + 1)],
        }

    def describe(self) -> str:
        lines = [f"Cascade plan {self.base[0]}x{self.base[1]} -> {self.target[0]}x{self.target[1]} (R={self.R})"]
        for index, (height, width) in enumerate(self.stages):
            if index == 0:
                lines.append(f"  stage 0: {height}x{width}  base generation from pure noise")
            else:
                fh, fw = self.factor(index)
                lines.append(f"  stage {index}: {height}x{width}  pivot upsampled x({fh},{fw})")
        return "\n".join(lines)


def plan(d_base: Sequence[int], d_target: Sequence[int]) -> CascadePlan:
    """
    Split a resolution jump into stages of at most 4x pixels each

    Each axis must grow by a power of two. Doublings happen as early as
    possible, so every stage doubles at least one axis and the last lands
    exactly on the target.

    Args:
        d_base: (H, W) of the base model
        d_target: (H, W) requested

    Returns:
        CascadePlan with R = ceil(log4(pixel ratio))

    Raises:
        PlanError: On a shrinking axis, a non power-of-two factor, or an aspect
            change that needs more than a 2x axis factor per stage
    """
    base = (int(d_base[0]), int(d_base[1]))
    target = (int(d_target[0]), int(d_target[1]))
    if min(base) < 1:
        raise PlanError(f"Base resolution must be positive, got {base}")
    if target[0] < base[0] or target[1] < base[1]:
        raise PlanError(f"Target {target} is smaller than base {base} along some axis")
    if target[0] % base[0] or target[1] % base[1]:
        raise PlanError(f"Target {target} is not an integer multiple of base {base}")

    n_h = _doublings(target[0] // base[0], "Height")
    n_w = _doublings(target[1] // base[1], "Width")
    stages_needed = (n_h + n_w + 1) // 2
    if max(n_h, n_w) > stages_needed:
        raise PlanError(f"Aspect change {base} -> {target} needs {max(n_h, n_w)} axis doublings "
                        f"but the pixel ratio allows only {stages_needed} stages")

    stages = [base]
    for r in range(1, stages_needed + 1):
        height = base[0] * 2 ** min(r, n_h)
        width = base[1] * 2 ** min(r, n_w)
        stages.append((height, width))
    return CascadePlan(base=base, target=target, stages=tuple(stages))


def stage_seed(seed: int, stage: int, stream: int = INIT_STREAM) -> int:
    """Integer seed for one random stream of one stage"""
    return int(np.random.SeedSequence([int(seed), int(stage), int(stream)]).generate_state(1)[0])


@dataclass
class StageRun:
    index: int
    mode: StageMode
    seed: int
    ddim_plan: DdimPlan
    resolution: Resolution
    pivot: Optional[Tensor] = None
    output: Optional[Tensor] = None

    @property
    def start_step(self) -> int:
        return self.ddim_plan.start_step


@dataclass
class CascadeResult:
    final: Tensor
    # clean outputs of stages 0..R-1 that seeded the following stage
    pivots: List[Tensor] = field(default_factory=list)
    stage_runs: List[StageRun] = field(default_factory=list)

    @property
    def stage_outputs(self) -> List[Tensor]:
        return [run.output for run in self.stage_runs]


def ddim_sample(denoise: DenoiseFn, z_start: Tensor, schedule: NoiseSchedule, ddim_plan: DdimPlan,
                noise_rng: Optional[np.random.Generator] = None, progress: bool = False,
                description: str = "sampling") -> Tensor:
    """
    Run a DDIM plan from z_start down to the clean state

    Args:
        denoise: Maps (z_t, t) to predicted noise
        z_start: Latent at ddim_plan.start_step
        schedule: Noise schedule
        ddim_plan: Strictly decreasing step indices
        noise_rng: Source of fresh noise, required when eta > 0
        progress: Show a progress bar on a terminal

    Returns:
        Clean latent z_0
    """
    if ddim_plan.eta > 0 and noise_rng is None:
        raise CascadeError("Stochastic DDIM (eta > 0) needs a noise generator")
    z = z_start
    transitions = list(ddim_plan.transitions())
    for t, t_prev in tqdm(transitions, desc=description, leave=False,
                          disable=not (progress and sys.stdout.isatty())):
        eps = denoise(z, t)
        noise = None
        if ddim_plan.eta > 0:
            noise = Tensor(noise_rng.standard_normal(z.shape), dtype=z.dtype)
        z = ddim_step(z, eps, t, t_prev, schedule, eta=ddim_plan.eta, noise=noise)
    return z


def _initial_noise(seed: int, shape: Tuple[int, ...]) -> Tensor:
    rng = np.random.default_rng(stage_seed(seed, 0, INIT_STREAM))
    return Tensor(rng.standard_normal(shape), dtype=get_default_dtype())


def sample_base(model: TinyUNet, resolution: Resolution, schedule: NoiseSchedule, c=None, seed: int = 0,
                ddim_steps: int = 50, eta: float = 0.0, batch: int = 1, progress: bool = False) -> Tensor:
    """Plain DDIM sampling from pure noise at one resolution"""
    ddim_plan = make_ddim_plan(schedule.T, ddim_steps, eta)
    z_start = _initial_noise(seed, (batch, model.config.in_channels, resolution[0], resolution[1]))
    noise_rng = np.random.default_rng(stage_seed(seed, 0, NOISE_STREAM))
    return ddim_sample(lambda z, t: model.denoise(z, t, c)[0], z_start, schedule, ddim_plan,
                       noise_rng, progress, "stage 0")


def sample_cascade(model: TinyUNet, stacks: Optional[Sequence[UpsamplerStack]], cascade_plan: CascadePlan,
                   schedule: NoiseSchedule, c=None, seed: int = 0, ddim_steps: int = 50, eta: float = 0.0,
                   batch: int = 1, t_probe: int = 1, progress: bool = False) -> CascadeResult:
    """
    Staged self-cascade sampling

    Stage 0 samples from pure noise over the full T-step span. Every later
    stage upsamples the previous clean output, diffuses it to step K and
    denoises K -> 0. With stacks given (tuned mode), each denoise call at
    stage r also injects stacks[r - 1] applied to the previous output's skip
    features.

    Args:
        model: Base denoiser, used at every stage
        stacks: One upsampler stack per stage transition, or None for tuning-free
        cascade_plan: Stage resolutions
        schedule: Noise schedule
        c: Class label(s)
        seed: Sampling seed
        ddim_steps: DDIM steps over the full span; later stages use the same count over K steps
        eta: DDIM stochasticity
        batch: Images per call
        t_probe: Timestep at which pivot skip features are read

    Returns:
        CascadeResult with the final image and every intermediate pivot

    Raises:
        CascadeError: When tuned mode lacks a stack for some stage
    """
    mode = StageMode.TUNING_FREE if stacks is None else StageMode.TUNED
    if stacks is not None:
        if len(stacks) < cascade_plan.R or any(stacks[r] is None for r in range(cascade_plan.R)):
            raise CascadeError(f"Tuned sampling needs one upsampler stack per stage transition "
                               f"({cascade_plan.R}), got {len(stacks)}")
        for stack in stacks[:cascade_plan.R]:
            if len(stack) != model.tap_count:
                raise ShapeError(f"Stack has {len(stack)} levels but the denoiser taps {model.tap_count}")

    base_plan = make_ddim_plan(schedule.T, ddim_steps, eta)
    base_run = StageRun(0, mode, seed, base_plan, cascade_plan.stages[0])
    base_run.output = sample_base(model, cascade_plan.stages[0], schedule, c, seed, ddim_steps, eta,
                                  batch, progress)
    runs = [base_run]
    pivots: List[Tensor] = []

    for r in range(1, cascade_plan.R + 1):
        previous = runs[-1].output
        height, width = cascade_plan.stages[r]
        factor = cascade_plan.factor(r)
        stage_plan = make_ddim_plan(schedule.K, ddim_steps, eta)
        run = StageRun(r, mode, seed, stage_plan, (height, width), pivot=previous)
        z_start = pivot_replace(previous, schedule, factor, stage_seed(seed, r, INIT_STREAM),
                                target_shape=(batch, model.config.in_channels, height, width))

        if mode is StageMode.TUNED:
            stack = stacks[r - 1]
            features = extract_pivot_features(model, previous, t_probe, c)

            def denoise(z, t, stack=stack, features=features, factor=factor):
                return model.denoise(z, t, c, inject=stack.apply(features, t, factor))[0]
        else:
            def denoise(z, t):
                return model.denoise(z, t, c)[0]

        noise_rng = np.random.default_rng(stage_seed(seed, r, NOISE_STREAM))
        run.output = ddim_sample(denoise, z_start, schedule, stage_plan, noise_rng, progress, f"stage {r}")
        pivots.append(previous)
        runs.append(run)

    return CascadeResult(final=runs[-1].output, pivots=pivots, stage_runs=runs)


def tuning_loss(composite: UpsampledDenoiser, batch: Tuple[np.ndarray, Optional[np.ndarray]],
                s: NoiseSchedule, rng: np.random.Generator,
                pivot_noise_std: float = 0.0) -> Tuple[Tensor, Graph]:
    """
    Upsampler tuning objective on one batch of stage-resolution images

    The pivot is the 2x2-area-downsampled batch. Timesteps are drawn from
    1..K, the noisy latent by forward diffusion, and the loss is the mean
    squared error of the injected prediction. Only the stack is recorded.

    Returns:
        (loss, graph) ready for backward()
    """
    x0, labels = batch
    x0 = np.asarray(x0)
    if x0.ndim != 4:
        raise ShapeError(f"Tuning batch must be (B, C, H, W), got {x0.shape}")
    if composite.resolution is not None and tuple(x0.shape[2:]) != tuple(composite.resolution):
        raise ShapeError(f"Tuning batch resolution {tuple(x0.shape[2:])} does not match stage "
                         f"{composite.stage} resolution {tuple(composite.resolution)}")
    factor = composite.factor or composite.stack.config.factor
    dtype = get_default_dtype()
    batch_size = x0.shape[0]

    t = rng.integers(1, s.K + 1, size=batch_size)
    eps = Tensor(rng.standard_normal(x0.shape), dtype=dtype)
    z0 = Tensor(x0, dtype=dtype)
    pivot = F.avg_pool2d(z0, factor)
    if pivot_noise_std > 0:
        pivot = F.add(pivot, Tensor(rng.normal(0.0, pivot_noise_std, size=pivot.shape), dtype=dtype))
    z_t = forward_diffuse(z0, t, eps, s)
    c = None if labels is None else np.asarray(labels)

    with Graph(composite.trainable_parameters()) as graph:
        features: FeatureGroup = extract_pivot_features(composite.model, pivot,
                                                        composite.stack.config.t_probe, c)
        eps_pred = composite.forward(z_t, t, c, pivot_features=features)
        loss = F.mse_loss(eps_pred, eps)
    return loss, graph


def tune_step(composite: UpsampledDenoiser, batch: Tuple[np.ndarray, Optional[np.ndarray]], s: NoiseSchedule,
              rng: np.random.Generator, optimizer, pivot_noise_std: float = 0.0) -> float:
    """One optimizer update of the upsampler stack; returns the loss before the update"""
    loss, graph = tuning_loss(composite, batch, s, rng, pivot_noise_std)
    optimizer.step(backward(loss, graph))
    return loss.item()
