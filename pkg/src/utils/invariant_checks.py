"""
Invariant Suite

Gradient checks against central finite differences, schedule and pivot
replacement moment checks, zero-init equivalence of the upsampler and
low-rank arms, the freeze contract, and checkpoint round trips. Backs the
`check` CLI command; `quick=True` shrinks draw counts and step counts.
"""

import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core import functional as F
from src.core.denoiser import TinyUNet, UNetConfig, extract_pivot_features, parameter_census
from src.core.lowrank import attach_lowrank
from src.core.schedule import make_ddim_plan, make_schedule, pivot_replace
from src.core.tensor import Graph, Parameter, Tensor, backward, use_precision
from src.core.upsampler import UpsamplerConfig, UpsamplerStack, freeze_base_attach
from src.managers.cascade_manager import plan, sample_cascade, tuning_loss
from src.managers.training_manager import Adam
from src.utils.checkpoint import Checkpoint
from src.utils.config import CODE_VERSION, RunConfig
from src.utils.run_logger import RunEventType, get_run_logger

GRAD_TOLERANCE = 1e-4
FD_STEP = 1e-4

TINY_UNET = UNetConfig(in_channels=3, base_channels=8, levels=2, blocks_per_level=1, time_embed_dim=16,
                       num_classes=3, groupnorm_groups=4, channel_mults=(1, 2), taps=2)
TINY_UPSAMPLER = UpsamplerConfig(levels=2, hidden_channels=4, time_embed_dim=8, groupnorm_groups=2)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0
    detail: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)


def finite_difference_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = FD_STEP,
                            max_entries: Optional[int] = 24, seed: int = 0,
                            graph_fn: Optional[Callable[[], Tuple[Tensor, Graph]]] = None) -> float:
    """
    Max normwise relative error between backward() and central differences

    Args:
        loss_fn: Builds the scalar loss from the current parameter values
        params: Parameters to differentiate; perturbed in place and restored
        h: Finite-difference step
        max_entries: Entries sampled per parameter, None for all
        seed: Seed for the entry sample
        graph_fn: Builds (loss, graph) itself when the loss opens its own Graph

    Returns:
        Worst relative error over the parameters
    """
    if graph_fn is None:
        with Graph(params) as graph:
            loss = loss_fn()
    else:
        loss, graph = graph_fn()
    analytic = backward(loss, graph)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for param in params:
        original = np.array(param.data, copy=True)
        flat_size = original.size
        if max_entries is None or flat_size <= max_entries:
            entries = np.arange(flat_size)
        else:
            entries = rng.choice(flat_size, size=max_entries, replace=False)
        numeric = np.zeros(len(entries))
        for k, index in enumerate(entries):
            perturbed = original.copy().ravel()
            perturbed[index] += h
            param.assign(perturbed.reshape(original.shape))
            upper = loss_fn().item()
            perturbed[index] -= 2 * h
            param.assign(perturbed.reshape(original.shape))
            lower = loss_fn().item()
            numeric[k] = (upper - lower) / (2 * h)
        param.assign(original)
        exact = analytic[param].ravel()[entries]
        scale = max(np.linalg.norm(exact), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(exact - numeric) / scale))
    return worst


def _projection(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _op_cases(rng: np.random.Generator) -> Dict[str, Callable[[], tuple]]:
    """name -> builder of (loss_fn, params); every builder runs in float64"""

    def conv():
        x = Parameter(rng.standard_normal((2, 3, 6, 6)))
        w = Parameter(rng.standard_normal((4, 3, 3, 3)))
        b = Parameter(rng.standard_normal(4))
        proj = _projection(rng, (2, 4, 3, 3))
        return (lambda: F.sum(F.mul(F.conv2d(x, w, b, stride=2, padding=1), proj))), [x, w, b]

    def group_norm():
        x = Parameter(rng.standard_normal((2, 8, 3, 3)))
        gamma = Parameter(rng.standard_normal(8))
        beta = Parameter(rng.standard_normal(8))
        proj = _projection(rng, (2, 8, 3, 3))
        return (lambda: F.sum(F.mul(F.group_norm(x, 4, gamma, beta), proj))), [x, gamma, beta]

    def linear():
        x = Parameter(rng.standard_normal((3, 5)))
        w = Parameter(rng.standard_normal((4, 5)))
        b = Parameter(rng.standard_normal(4))
        proj = _projection(rng, (3, 4))
        return (lambda: F.sum(F.mul(F.linear(x, w, b), proj))), [x, w, b]

    def silu():
        x = Parameter(rng.standard_normal((2, 3, 4)))
        proj = _projection(rng, (2, 3, 4))
        return (lambda: F.sum(F.mul(F.silu(x), proj))), [x]

    def elementwise():
        a = Parameter(rng.standard_normal((2, 3)))
        b = Parameter(rng.standard_normal((1, 3)))
        return (lambda: F.mean(F.mul(F.add(a, b), F.sub(a, b)))), [a, b]

    def mse():
        a = Parameter(rng.standard_normal((2, 3, 2, 2)))
        target = _projection(rng, (2, 3, 2, 2))
        return (lambda: F.mse_loss(a, target)), [a]

    def matmul_concat():
        a = Parameter(rng.standard_normal((3, 4)))
        b = Parameter(rng.standard_normal((4, 2)))
        proj = _projection(rng, (3, 4))
        return (lambda: F.sum(F.mul(F.concat([F.matmul(a, b), F.matmul(a, b)], axis=1), proj))), [a, b]

    def bilinear():
        x = Parameter(rng.standard_normal((1, 2, 3, 4)))
        proj = _projection(rng, (1, 2, 6, 8))
        return (lambda: F.sum(F.mul(F.bilinear_upsample(x, 2), proj))), [x]

    def pooling():
        x = Parameter(rng.standard_normal((1, 2, 4, 4)))
        proj = _projection(rng, (1, 2, 2, 2))
        return (lambda: F.add(F.sum(F.mul(F.avg_pool2d(x, 2), proj)),
                              F.sum(F.mul(F.nearest_downsample(x, 2), proj)))), [x]

    def embedding():
        t = Parameter(rng.uniform(0.0, 5.0, size=3))
        proj = _projection(rng, (3, 8))
        return (lambda: F.sum(F.mul(F.timestep_embedding(t, 8), proj))), [t]

    return {
        "grad.conv2d": conv,
        "grad.group_norm": group_norm,
        "grad.linear": linear,
        "grad.silu": silu,
        "grad.add_sub_mul_mean": elementwise,
        "grad.mse_loss": mse,
        "grad.matmul_concat": matmul_concat,
        "grad.bilinear_upsample": bilinear,
        "grad.avg_pool_nearest": pooling,
        "grad.timestep_embedding": embedding,
    }


def _timed(name: str, threshold: float, fn: Callable[[], float], higher_is_worse: bool = True) -> CheckResult:
    started = time.perf_counter()
    try:
        value = float(fn())
    except Exception as e:
        return CheckResult(name, False, float("nan"), threshold, time.perf_counter() - started, str(e))
    passed = value < threshold if higher_is_worse else value >= threshold
    return CheckResult(name, passed, value, threshold, time.perf_counter() - started)


def check_composite_gradient(quick: bool = False) -> float:
    """Finite differences through the frozen UNet with an injected upsampler stack"""
    with use_precision(np.float64):
        model = TinyUNet(TINY_UNET, seed=1)
        stack = UpsamplerStack.for_model(model, TINY_UPSAMPLER, seed=2)
        rng = np.random.default_rng(3)
        for upsampler in stack.upsamplers:
            # a zero output conv would leave every other stack gradient at exactly zero
            upsampler.proj_out.weight.assign(rng.normal(0.0, 0.1, size=upsampler.proj_out.weight.shape))
        composite = freeze_base_attach(model, stack, stage=1, resolution=(8, 8))
        schedule = make_schedule("linear", T=100, K=70)
        images = rng.uniform(-1.0, 1.0, size=(2, 3, 8, 8))
        labels = np.array([1, 2])

        def graph_fn():
            return tuning_loss(composite, (images, labels), schedule, np.random.default_rng(4))

        def loss_fn():
            return graph_fn()[0]

        params = composite.trainable_parameters()
        if quick:
            params = params[:6]
        stack_error = finite_difference_check(loss_fn, params, max_entries=4 if quick else 12, graph_fn=graph_fn)

        model.unfreeze()
        base_params = [model.conv_in.weight, model.encoder[0].blocks[0].conv1.weight, model.conv_out.bias,
                       model.decoder[1].blocks[0].time_proj.weight]
        base_error = finite_difference_check(loss_fn, base_params, max_entries=4 if quick else 12,
                                                 graph_fn=graph_fn)
        model.freeze()
    return max(stack_error, base_error)


def check_alpha_bar_identity() -> float:
    worst = 0.0
    for kind in ("linear", "cosine"):
        s = make_schedule(kind, T=1000, K=700)
        worst = max(worst, float(np.max(np.abs(np.cumprod(1.0 - s.betas) - s.alpha_bars))))
    return worst


def check_pivot_moments(draws: int = 10000) -> float:
    """
    Largest violation ratio of the pooled mean (3 sigma band) and variance (5%)

    Values below 1 pass.
    """
    s = make_schedule("linear", T=1000, K=700)
    with use_precision(np.float64):
        rng = np.random.default_rng(11)
        pivot = np.broadcast_to(rng.uniform(-1, 1, size=(1, 1, 2, 2)), (draws, 1, 2, 2))
        z0 = Tensor(pivot)
        out = pivot_replace(z0, s, 2, rng_seed=12).numpy()
        expected = np.sqrt(s.alpha_bar(s.K)) * F.bilinear_upsample(z0, 2).numpy()
    variance = 1.0 - s.alpha_bar(s.K)
    residual = out - expected
    sigma_mean = np.sqrt(variance / residual.size)
    mean_ratio = abs(residual.mean()) / (3.0 * sigma_mean)
    var_ratio = abs(residual.var() / variance - 1.0) / 0.05
    return max(mean_ratio, var_ratio)


def check_ddim_plans() -> float:
    """Number of malformed plans over a grid of start steps and step counts"""
    bad = 0
    for start in (1, 2, 7, 70, 700, 1000):
        for steps in (1, 2, 3, 50, 1000):
            indices = make_ddim_plan(start, steps).step_indices
            if indices[0] != start or any(b >= a for a, b in zip(indices, indices[1:])) or indices[-1] < 1:
                bad += 1
    return bad


def check_zero_init_equivalence(seeds: int = 16) -> float:
    model = TinyUNet(TINY_UNET, seed=5)
    stack = UpsamplerStack.for_model(model, TINY_UPSAMPLER, seed=6)
    cascade_plan = plan((8, 8), (16, 16))
    schedule = make_schedule("linear", T=100, K=70)
    worst = 0.0
    for seed in range(seeds):
        tuned = sample_cascade(model, [stack], cascade_plan, schedule, c=1, seed=seed, ddim_steps=5)
        free = sample_cascade(model, None, cascade_plan, schedule, c=1, seed=seed, ddim_steps=5)
        worst = max(worst, float(np.max(np.abs(tuned.final.numpy() - free.final.numpy()))))
    return worst


def check_lowrank_identity() -> float:
    model = TinyUNet(TINY_UNET, seed=7)
    rng = np.random.default_rng(8)
    z = Tensor(rng.standard_normal((2, 3, 8, 8)))
    before = model(z, 10, [0, 1]).numpy()
    composite = attach_lowrank(model, rank=2, seed=9)
    after = composite(z, 10, [0, 1]).numpy()
    composite.detach()
    return float(np.max(np.abs(before - after)))


def check_freeze_contract(steps: int = 20) -> float:
    """Bytes of the base group that changed during tuning (must be 0)"""
    model = TinyUNet(TINY_UNET, seed=10)
    stack = UpsamplerStack.for_model(model, TINY_UPSAMPLER, seed=11)
    composite = freeze_base_attach(model, stack, stage=1, resolution=(16, 16))
    before = Checkpoint.from_parameter_groups(composite.parameter_groups(), "check", CODE_VERSION).group_bytes("base")
    schedule = make_schedule("linear", T=100, K=70)
    optimizer = Adam(composite.trainable_parameters(), lr=1e-3)
    rng = np.random.default_rng(12)
    for _ in range(steps):
        images = rng.uniform(-1.0, 1.0, size=(2, 3, 16, 16))
        loss, graph = tuning_loss(composite, (images, np.array([1, 2])), schedule, rng)
        optimizer.step(backward(loss, graph))
    after = Checkpoint.from_parameter_groups(composite.parameter_groups(), "check", CODE_VERSION).group_bytes("base")
    if len(before) != len(after):
        return float(max(len(before), len(after)))
    return float(np.sum(np.frombuffer(before, np.uint8) != np.frombuffer(after, np.uint8)))


def check_parameter_ratio(config: Optional[RunConfig] = None) -> float:
    """|upsampler stack| / |base| at the configured sizes"""
    config = config or RunConfig()
    model = TinyUNet(config.unet_config())
    stack = UpsamplerStack.for_model(model, config.upsampler)
    census = parameter_census(freeze_base_attach(model, stack))
    return census["trainable"] / census["per_group"]["base"]


def check_checkpoint_round_trip() -> float:
    model = TinyUNet(TINY_UNET, seed=13)
    first = Checkpoint.from_parameter_groups(model.parameter_groups(), "check", CODE_VERSION).to_bytes()
    second = Checkpoint.from_bytes(first).to_bytes()
    return 0.0 if first == second else 1.0


def check_pivot_feature_shapes() -> float:
    """Mismatched shapes between upsampled pivot features and stage skips"""
    model = TinyUNet(TINY_UNET, seed=14)
    stack = UpsamplerStack.for_model(model, TINY_UPSAMPLER, seed=15)
    pivot = Tensor(np.zeros((1, 3, 8, 8)))
    deltas = stack.apply(extract_pivot_features(model, pivot, 1), 5)
    expected = model.skip_shapes(1, 16, 16)
    return float(sum(d.shape != e for d, e in zip(deltas, expected)))


def run_checks(quick: bool = False) -> List[CheckResult]:
    """
    Run the full invariant suite

    Args:
        quick: Fewer seeds, steps and finite-difference entries

    Returns:
        One CheckResult per invariant, in a fixed order
    """
    results = []
    with use_precision(np.float64):
        for name, builder in _op_cases(np.random.default_rng(0)).items():
            loss_fn, params = builder()
            results.append(_timed(name, GRAD_TOLERANCE,
                                  lambda: finite_difference_check(loss_fn, params, max_entries=8 if quick else 24)))
    results.append(_timed("grad.unet_with_upsamplers", GRAD_TOLERANCE, lambda: check_composite_gradient(quick)))
    results.append(_timed("schedule.alpha_bar_cumprod", 1e-10, check_alpha_bar_identity))
    results.append(_timed("schedule.pivot_replace_moments", 1.0, check_pivot_moments))
    results.append(_timed("schedule.ddim_plans", 0.5, check_ddim_plans))
    results.append(_timed("upsampler.zero_init_equivalence", 1e-6,
                          lambda: check_zero_init_equivalence(2 if quick else 16)))
    results.append(_timed("upsampler.feature_shapes", 0.5, check_pivot_feature_shapes))
    results.append(_timed("upsampler.parameter_ratio", 0.01, check_parameter_ratio))
    results.append(_timed("lowrank.identity_at_init", 1e-6, check_lowrank_identity))
    results.append(_timed("freeze.base_bytes_unchanged", 0.5, lambda: check_freeze_contract(3 if quick else 20)))
    results.append(_timed("checkpoint.round_trip", 0.5, check_checkpoint_round_trip))

    logger = get_run_logger()
    for result in results:
        logger.log_operation(RunEventType.CHECK_RESULT, f"Check {result.name}", success=result.passed,
                             details=result.to_dict())
    return results
