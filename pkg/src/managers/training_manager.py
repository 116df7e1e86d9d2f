"""
Training Manager Module

This module handles the training side of every arm: the Adam optimizer, the
arm definitions (which parameters train, at which resolution, under which
loss), and the step loop that writes the metric CSV, checkpoints, the loss
curve and a diagnostic snapshot when the loss stops being finite.
"""

import json
import os
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.core.denoiser import TinyUNet
from src.core.lowrank import LowRankComposite
from src.core.schedule import NoiseSchedule
from src.core.tensor import Graph, Parameter, Tensor, backward
from src.core.upsampler import UpsamplerStack, freeze_base_attach
from src.managers.baseline_manager import denoising_loss
from src.managers.cascade_manager import CascadePlan, Resolution, tuning_loss
from src.utils.checkpoint import Checkpoint
from src.utils.config import CODE_VERSION, ArmKind, RunConfig, config_hash
from src.utils.error_handler import NonFiniteError
from src.utils.report_generator import append_csv_row, plot_curves
from src.utils.run_logger import get_run_logger

Batch = Tuple[np.ndarray, Optional[np.ndarray]]
LossFn = Callable[[Batch, np.random.Generator], Tuple[Tensor, Graph]]

METRIC_FIELDS = ["step", "phase", "loss", "smoothed_loss", "eval_loss"]
SMOOTHING_WINDOW = 100


class Adam:
    """
    Adam without weight decay

    Moments are keyed by parameter identity, so the optimizer must be built
    over the same Parameter objects the gradients are reported for.
    """

    def __init__(self, parameters: Sequence[Parameter], lr: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.parameters = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {id(p): np.zeros(p.shape, dtype=p.dtype) for p in self.parameters}
        self._v = {id(p): np.zeros(p.shape, dtype=p.dtype) for p in self.parameters}

    def step(self, grads: Dict[Parameter, np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for param in self.parameters:
            grad = grads.get(param)
            if grad is None:
                continue
            key = id(param)
            m = self.beta1 * self._m[key] + (1.0 - self.beta1) * grad
            v = self.beta2 * self._v[key] + (1.0 - self.beta2) * grad * grad
            self._m[key], self._v[key] = m, v
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.assign(param.data - update.astype(param.dtype))


@dataclass
class TrainingPhase:
    label: str
    resolution: Resolution
    loss_fn: LossFn
    parameters: List[Parameter]


class TrainingArm:
    """Base class: what trains, at which resolution, and what gets checkpointed"""

    kind: ArmKind = ArmKind.BASE

    def __init__(self, model: TinyUNet):
        self.model = model

    @property
    def name(self) -> str:
        return self.kind.value

    def phases(self) -> List[TrainingPhase]:
        return []

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Parameter]]]:
        return self.model.parameter_groups()

    def census(self) -> Dict[str, object]:
        per_group = {g: int(sum(p.size for _, p in params)) for g, params in self.parameter_groups().items()}
        trainable = int(sum(p.size for phase in self.phases() for p in phase.parameters))
        return {"total": sum(per_group.values()), "trainable": trainable, "per_group": per_group}


class BaseArm(TrainingArm):
    """Pretrains the base denoiser at the base resolution"""

    kind = ArmKind.BASE

    def __init__(self, model: TinyUNet, resolution: Resolution, schedule: NoiseSchedule):
        super().__init__(model)
        self.resolution = tuple(resolution)
        self.schedule = schedule
        model.unfreeze()

    def phases(self) -> List[TrainingPhase]:
        def loss_fn(batch, rng):
            return denoising_loss(self.model, batch, self.schedule, rng, self.resolution)
        return [TrainingPhase("base", self.resolution, loss_fn, self.model.trainable_parameters())]


class FullFinetuneArm(BaseArm):
    """Every base parameter trained with the denoising loss at the target resolution"""

    kind = ArmKind.FULL_FT

    def phases(self) -> List[TrainingPhase]:
        phase = super().phases()[0]
        phase.label = "full_ft"
        return [phase]


class LowRankArm(TrainingArm):
    kind = ArmKind.LOWRANK

    def __init__(self, composite: LowRankComposite, resolution: Resolution, schedule: NoiseSchedule):
        super().__init__(composite.model)
        self.composite = composite
        self.resolution = tuple(resolution)
        self.schedule = schedule

    def phases(self) -> List[TrainingPhase]:
        def loss_fn(batch, rng):
            return denoising_loss(self.composite, batch, self.schedule, rng, self.resolution)
        return [TrainingPhase("lowrank", self.resolution, loss_fn,
                              [p for _, p in self.composite.adapter_parameters()])]

    def parameter_groups(self):
        return self.composite.parameter_groups()


class UpsamplerArm(TrainingArm):
    """
    Tunes one feature-upsampler stack per cascade stage, lowest stage first,
    with the base denoiser frozen
    """

    kind = ArmKind.OURS_T

    def __init__(self, model: TinyUNet, stacks: Sequence[UpsamplerStack], cascade_plan: CascadePlan,
                 schedule: NoiseSchedule, pivot_noise_std: float = 0.0):
        super().__init__(model)
        self.stacks = list(stacks)
        self.plan = cascade_plan
        self.schedule = schedule
        self.pivot_noise_std = pivot_noise_std
        self.composites = [
            freeze_base_attach(model, stack, stage=r, resolution=cascade_plan.stages[r],
                               factor=cascade_plan.factor(r))
            for r, stack in enumerate(self.stacks, start=1)
        ]

    def phases(self) -> List[TrainingPhase]:
        phases = []
        for composite in self.composites:
            def loss_fn(batch, rng, composite=composite):
                return tuning_loss(composite, batch, self.schedule, rng, self.pivot_noise_std)
            phases.append(TrainingPhase(composite.group_name, composite.resolution, loss_fn,
                                        composite.trainable_parameters()))
        return phases

    def parameter_groups(self):
        groups = {"base": list(self.model.named_parameters())}
        for composite in self.composites:
            groups[composite.group_name] = list(composite.stack.named_parameters())
        return groups


class FrozenArm(TrainingArm):
    """Zero-parameter arms (tuning-free cascade, direct inference)"""

    def __init__(self, model: TinyUNet, kind: ArmKind):
        super().__init__(model)
        self.kind = kind
        model.freeze()


@dataclass
class TrainResult:
    arm: str
    steps: int
    checkpoint_path: str
    checkpoint_sha256: str
    metrics_path: str
    checkpoints: List[str] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    census: Dict[str, object] = field(default_factory=dict)


def _format(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.10g}"


def _parameter_stats(groups: Dict[str, List[Tuple[str, Parameter]]]) -> Dict[str, Dict[str, float]]:
    stats = {}
    for group, params in groups.items():
        arrays = [np.asarray(p.data, dtype=np.float64).ravel() for _, p in params]
        flat = np.concatenate(arrays) if arrays else np.zeros(0)
        finite = flat[np.isfinite(flat)]
        stats[group] = {
            "count": int(flat.size),
            "non_finite": int(flat.size - finite.size),
            "l2_norm": float(np.linalg.norm(finite)) if finite.size else 0.0,
            "max_abs": float(np.max(np.abs(finite))) if finite.size else 0.0,
        }
    return stats


def write_diagnostic(out_dir: str, step: int, phase: str, error: BaseException, recent_losses: Sequence[float],
                     groups: Dict[str, List[Tuple[str, Parameter]]], run_id: str) -> str:
    """Dump the state around a non-finite loss as JSON; returns the path"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"diagnostic_step{step:06d}.json")
    snapshot = {
        "step": step,
        "phase": phase,
        "error": str(error),
        "config_hash": run_id,
        "code_version": CODE_VERSION,
        "recent_losses": [float(x) for x in recent_losses],
        "parameters": _parameter_stats(groups),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)
    return path


def save_checkpoint(arm: TrainingArm, config: RunConfig, step: int, directory: str) -> Tuple[str, str]:
    path = os.path.join(directory, f"step_{step:06d}.ckpt")
    checkpoint = Checkpoint.from_parameter_groups(arm.parameter_groups(), config_hash(config), CODE_VERSION,
                                                  step=step, arm=arm.name)
    digest = checkpoint.save(path)
    get_run_logger().log_checkpoint(config_hash(config), path, step, checkpoint.group_names())
    return path, digest


def train_loop(arm: TrainingArm, dataset, config: RunConfig, out_dir: str, eval_dataset=None,
               eval_hook: Optional[Callable[[TrainingPhase], float]] = None,
               progress: bool = True) -> TrainResult:
    """
    Run every training phase of an arm for config.train.steps steps each

    Args:
        arm: What to train
        dataset: Training images with sample_batch(rng, batch, resolution)
        config: Run configuration
        out_dir: Receives metrics.csv, checkpoints/, loss_curve.svg, train_summary.json
        eval_dataset: Held-out images for the default eval hook (held-out loss)
        eval_hook: Returns the eval metric logged every eval_every steps
        progress: Show a progress bar on a terminal

    Returns:
        TrainResult describing the written artifacts

    Raises:
        NonFiniteError: With diagnostic_path set, when a loss or update is not finite
    """
    train = config.train
    run_id = config_hash(config)
    logger = get_run_logger()
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_dir = os.path.join(out_dir, "checkpoints")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)

    conditional = config.unet.num_classes > 0
    rng = np.random.default_rng(train.seed)
    held_out = eval_dataset if eval_dataset is not None else dataset

    def default_eval(phase: TrainingPhase) -> float:
        eval_rng = np.random.default_rng([train.seed, 1])
        images, labels = held_out.sample_batch(eval_rng, train.batch, phase.resolution)
        loss, _ = phase.loss_fn((images, labels if conditional else None), eval_rng)
        return loss.item()

    eval_hook = eval_hook or default_eval
    started = time.perf_counter()
    logger.log_run_started("train", run_id, {"arm": arm.name, "steps": train.steps})

    path, digest = save_checkpoint(arm, config, 0, checkpoint_dir)
    checkpoints = [path]
    phases = arm.phases()
    total = train.steps * len(phases)
    losses: List[float] = []
    logged_steps: List[int] = []
    smoothed_curve: List[float] = []
    window: deque = deque(maxlen=SMOOTHING_WINDOW)
    global_step = 0

    bar = tqdm(total=total, desc=f"train {arm.name}", disable=not (progress and sys.stdout.isatty()))
    try:
        for phase in phases:
            optimizer = Adam(phase.parameters, lr=train.lr, beta1=train.beta1, beta2=train.beta2,
                             eps=train.adam_eps)
            for _ in range(train.steps):
                global_step += 1
                images, labels = dataset.sample_batch(rng, train.batch, phase.resolution)
                try:
                    loss, graph = phase.loss_fn((images, labels if conditional else None), rng)
                    value = loss.item()
                    optimizer.step(backward(loss, graph))
                except NonFiniteError as e:
                    diagnostic = write_diagnostic(out_dir, global_step, phase.label, e, list(window),
                                                  arm.parameter_groups(), run_id)
                    logger.log_non_finite(run_id, global_step, diagnostic)
                    raise NonFiniteError(f"Non-finite value at step {global_step} ({phase.label}): {e}",
                                         diagnostic) from None

                losses.append(value)
                window.append(value)
                smoothed = float(np.mean(window))
                bar.update(1)
                bar.set_postfix(loss=f"{value:.4f}")

                eval_value = eval_hook(phase) if global_step % train.eval_every == 0 else None
                if global_step % train.log_every == 0 or eval_value is not None or global_step == total:
                    append_csv_row(metrics_path, {
                        "step": global_step,
                        "phase": phase.label,
                        "loss": _format(value),
                        "smoothed_loss": _format(smoothed),
                        "eval_loss": _format(eval_value),
                    }, METRIC_FIELDS)
                    logged_steps.append(global_step)
                    smoothed_curve.append(smoothed)
                    logger.log_train_step(run_id, global_step, value,
                                          {"eval_loss": eval_value} if eval_value is not None else None)

                if global_step % train.checkpoint_every == 0 or global_step == total:
                    path, digest = save_checkpoint(arm, config, global_step, checkpoint_dir)
                    checkpoints.append(path)
    finally:
        bar.close()

    if not os.path.exists(metrics_path):
        _write_header(metrics_path)
    if losses:
        plot_curves({"loss": (range(1, len(losses) + 1), losses), "smoothed": (logged_steps, smoothed_curve)},
                    os.path.join(out_dir, "loss_curve.svg"), title=f"{arm.name} training loss")

    result = TrainResult(arm=arm.name, steps=global_step, checkpoint_path=checkpoints[-1],
                         checkpoint_sha256=digest, metrics_path=metrics_path, checkpoints=checkpoints,
                         losses=losses, wall_clock_seconds=time.perf_counter() - started, census=arm.census())
    _write_summary(result, config, out_dir)
    return result


def _write_header(path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRIC_FIELDS) + "\n")


def _write_summary(result: TrainResult, config: RunConfig, out_dir: str) -> None:
    """Run summary with wall-clock time; metrics.csv carries no timing"""
    summary = {
        "arm": result.arm,
        "steps": result.steps,
        "checkpoint": result.checkpoint_path,
        "checkpoint_sha256": result.checkpoint_sha256,
        "checkpoints": result.checkpoints,
        "wall_clock_seconds": result.wall_clock_seconds,
        "census": result.census,
        "config_hash": config_hash(config),
        "code_version": CODE_VERSION,
    }
    path = os.path.join(out_dir, "train_summary.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
