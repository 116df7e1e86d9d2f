"""
Experiment Manager Module

This module ties the pieces into the runs the CLI exposes: building models,
corpora and arms from a RunConfig, training, sampling to PNG, evaluation
into a MetricReport, and the multi-arm comparison driven by an experiment
descriptor.
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.denoiser import TinyUNet, parameter_census
from src.core.lowrank import LowRankComposite, attach_lowrank
from src.core.schedule import NoiseSchedule, make_schedule
from src.core.tensor import set_default_dtype
from src.core.upsampler import UpsamplerStack, freeze_base_attach
from src.managers.baseline_manager import direct_inference
from src.managers.cascade_manager import CascadePlan, plan, sample_base, sample_cascade
from src.managers.training_manager import (BaseArm, FrozenArm, FullFinetuneArm, LowRankArm, TrainingArm,
                                           TrainResult, UpsamplerArm, train_loop)
from src.utils.checkpoint import Checkpoint, file_sha256
from src.utils.config import CODE_VERSION, ArmKind, RunConfig, config_hash, load_config, provenance, save_config
from src.utils.error_handler import CheckpointError, ConfigError, DataError
from src.utils.metrics import (FeatureExtractor, MetricReport, base_consistency, count_statistics,
                               frechet_distance, kernel_distance, patch_metrics)
from src.utils.report_generator import NOT_IMPLEMENTED, format_table, mark_best, write_csv, write_metric_report
from src.utils.run_logger import RunEventType, get_run_logger
from src.utils.scenes import MANIFEST_FILE, ingest_png, make_corpus, save_png

CASCADE_ARMS = (ArmKind.OURS_TF, ArmKind.OURS_T)
UNIMPLEMENTED_ARMS = ("attn_sf", "scalecrafter")


def worker_count() -> int:
    """Eval worker threads, capped by CASCADE_THREADS"""
    available = os.cpu_count() or 1
    cap = os.getenv("CASCADE_THREADS")
    if cap:
        try:
            return max(1, min(available, int(cap)))
        except ValueError:
            raise ConfigError("CASCADE_THREADS", f"must be an integer, got {cap!r}") from None
    return available


def chunk_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def build_schedule(config: RunConfig) -> NoiseSchedule:
    s = config.schedule
    return make_schedule(s.kind, s.T, s.K, s.beta_start, s.beta_end)


def build_plan(config: RunConfig) -> CascadePlan:
    return plan(config.cascade.base, config.cascade.target)


def build_model(config: RunConfig) -> TinyUNet:
    return TinyUNet(config.unet_config(), seed=config.model_seed, max_timestep=config.schedule.T)


def build_stacks(config: RunConfig, model: TinyUNet, cascade_plan: CascadePlan) -> List[UpsamplerStack]:
    return [UpsamplerStack.for_model(model, config.upsampler, seed=config.model_seed + r)
            for r in range(1, cascade_plan.R + 1)]


def build_datasets(config: RunConfig, out_dir: Optional[str] = None):
    """
    (train, eval) handles from the scene corpus, or from a PNG directory when data.png_dir is set

    The corpus manifest goes into data.cache_dir, or into out_dir when no cache directory is set.
    """
    data = config.data
    if data.png_dir:
        images = ingest_png(data.png_dir, config.cascade.target)
        if len(images) < 2:
            raise DataError(f"Need at least 2 PNG files in {data.png_dir} to split train/eval")
        n_eval = min(data.n_eval, max(1, len(images) // 10))
        return images.split(n_eval)
    corpus = make_corpus(data.corpus_seed, data.n_train, data.n_eval, config.cascade.base,
                         config.cascade.target, data.min_objects, data.max_objects, data.cache_dir)
    if not data.cache_dir and out_dir:
        corpus.write_manifest(os.path.join(out_dir, MANIFEST_FILE))
    return corpus.train, corpus.eval


def conditioning_labels(config: RunConfig, source: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    """Labels for n generations: the source labels cycled, or object counts cycled when no source is given"""
    if config.unet.num_classes == 0:
        return None
    if source is None or len(source) == 0:
        counts = np.arange(config.data.min_objects, config.data.max_objects + 1)
        source = counts
    return np.resize(np.asarray(source, dtype=np.int64), n)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _load_base_weights(config: RunConfig, model: TinyUNet) -> None:
    path = config.train.base_checkpoint
    if not path:
        get_run_logger().log_warning("No train.base_checkpoint set; starting from randomly initialized base weights",
                                     run_id=config_hash(config))
        return
    Checkpoint.load(path).restore(model, "base")


def build_training_arm(config: RunConfig, model: TinyUNet, schedule: NoiseSchedule,
                       cascade_plan: CascadePlan) -> TrainingArm:
    kind = config.arm.kind
    if kind is ArmKind.BASE:
        return BaseArm(model, config.cascade.base, schedule)
    if kind is ArmKind.FULL_FT:
        return FullFinetuneArm(model, config.cascade.target, schedule)
    if kind is ArmKind.LOWRANK:
        composite = attach_lowrank(model, config.arm.rank, config.arm.include, config.arm.exclude,
                                   seed=config.model_seed)
        return LowRankArm(composite, config.cascade.target, schedule)
    if kind is ArmKind.OURS_T:
        return UpsamplerArm(model, build_stacks(config, model, cascade_plan), cascade_plan, schedule,
                            config.train.pivot_noise_std)
    return FrozenArm(model, kind)


def run_train(config: RunConfig, out_dir: Optional[str] = None, progress: bool = True) -> TrainResult:
    """
    Train the configured arm and write its artifacts under out_dir

    Zero-parameter arms (ours_tf, direct) only write the initial checkpoint.
    """
    set_default_dtype(config.precision)
    out_dir = out_dir or config.output_dir
    schedule = build_schedule(config)
    cascade_plan = build_plan(config)
    train_set, eval_set = build_datasets(config, out_dir)

    model = build_model(config)
    if config.arm.kind is not ArmKind.BASE:
        _load_base_weights(config, model)
    arm = build_training_arm(config, model, schedule, cascade_plan)

    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))
    return train_loop(arm, train_set, config, out_dir, eval_dataset=eval_set, progress=progress)


# --------------------------------------------------------------------------
# Loading arms for sampling and evaluation
# --------------------------------------------------------------------------

@dataclass
class LoadedArm:
    kind: ArmKind
    model: TinyUNet
    checkpoint: Checkpoint
    checkpoint_hash: str
    stacks: Optional[List[UpsamplerStack]] = None
    composite: Optional[LowRankComposite] = None

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def denoiser(self):
        return self.composite if self.composite is not None else self.model


def load_arm(config: RunConfig, checkpoint_path: str, cascade_plan: Optional[CascadePlan] = None) -> LoadedArm:
    """
    Rebuild the configured arm and restore its weights

    Raises:
        CheckpointError: On a missing group, or a tensor absent or shaped differently
    """
    cascade_plan = cascade_plan or build_plan(config)
    checkpoint = Checkpoint.load(checkpoint_path)
    if checkpoint.config_hash != config_hash(config):
        get_run_logger().log_warning("Checkpoint was written under a different config hash",
                                     {"checkpoint": checkpoint_path, "checkpoint_config": checkpoint.config_hash},
                                     run_id=config_hash(config))
    kind = config.arm.kind
    model = build_model(config)
    if "base" not in checkpoint.groups and config.train.base_checkpoint:
        # standalone upsampler or adapter export
        Checkpoint.load(config.train.base_checkpoint).restore(model, "base")
    else:
        checkpoint.restore(model, "base")
    loaded = LoadedArm(kind, model, checkpoint, file_sha256(checkpoint_path))

    if kind is ArmKind.OURS_T:
        stacks = build_stacks(config, model, cascade_plan)
        for r, stack in enumerate(stacks, start=1):
            checkpoint.restore(stack, f"upsampler_stage_{r}")
        loaded.stacks = stacks
    elif kind is ArmKind.LOWRANK:
        composite = attach_lowrank(model, config.arm.rank, config.arm.include, config.arm.exclude,
                                   seed=config.model_seed)
        checkpoint.restore(composite.adapter_set(), "adapter")
        loaded.composite = composite
    model.freeze()
    return loaded


def export_groups(checkpoint_path: str, groups: Sequence[str], out_path: str) -> str:
    """
    Write a checkpoint holding only the named groups, e.g. one upsampler stage

    Returns:
        SHA-256 of the written file
    """
    subset = Checkpoint.load(checkpoint_path).select(groups)
    digest = subset.save(out_path)
    get_run_logger().log_checkpoint(subset.config_hash, out_path, subset.step, list(groups))
    return digest


def trainable_count(loaded: LoadedArm, cascade_plan: CascadePlan) -> int:
    """Parameters the arm trains on top of the base model"""
    if loaded.kind is ArmKind.OURS_T:
        total = 0
        for r, stack in enumerate(loaded.stacks or [], start=1):
            composite = freeze_base_attach(loaded.model, stack, stage=r, resolution=cascade_plan.stages[r],
                                           factor=cascade_plan.factor(r))
            total += parameter_census(composite)["trainable"]
        return total
    if loaded.kind is ArmKind.LOWRANK:
        return int(sum(p.size for _, p in loaded.composite.adapter_parameters()))
    if loaded.kind in (ArmKind.FULL_FT, ArmKind.BASE):
        return loaded.model.parameter_count()
    return 0


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------

@dataclass
class Generation:
    final: np.ndarray
    # clean output per cascade stage, stage 0 first; direct arms give [base resolution, target]
    stages: List[np.ndarray]
    labels: Optional[np.ndarray]
    seconds: float = 0.0

    @property
    def base(self) -> np.ndarray:
        return self.stages[0]


def _generate_chunk(loaded: LoadedArm, config: RunConfig, schedule: NoiseSchedule, cascade_plan: CascadePlan,
                    seed: int, size: int, labels: Optional[np.ndarray]) -> List[np.ndarray]:
    ev = config.eval
    if loaded.kind in CASCADE_ARMS:
        stacks = loaded.stacks if loaded.kind is ArmKind.OURS_T else None
        result = sample_cascade(loaded.model, stacks, cascade_plan, schedule, labels, seed, ev.ddim_steps,
                                ev.eta, batch=size, t_probe=config.upsampler.t_probe)
        return [output.numpy() for output in result.stage_outputs]
    denoiser = loaded.denoiser
    base = sample_base(denoiser, cascade_plan.base, schedule, labels, seed, ev.ddim_steps, ev.eta, size)
    final = direct_inference(denoiser, cascade_plan.target, schedule, labels, seed, ev.ddim_steps, ev.eta, size)
    return [base.numpy(), final.numpy()]


def generate(loaded: LoadedArm, config: RunConfig, n: int, seed: int, labels: Optional[np.ndarray] = None,
             schedule: Optional[NoiseSchedule] = None, cascade_plan: Optional[CascadePlan] = None,
             workers: Optional[int] = None) -> Generation:
    """
    Generate n images in chunks of eval.batch spread over worker threads

    Chunk i is seeded from (seed, i), so the images do not depend on the
    number of workers.
    """
    schedule = schedule or build_schedule(config)
    cascade_plan = cascade_plan or build_plan(config)
    size = config.eval.batch
    starts = list(range(0, n, size))

    def run(index: int) -> List[np.ndarray]:
        start = starts[index]
        count = min(size, n - start)
        chunk_labels = None if labels is None else labels[start:start + count]
        return _generate_chunk(loaded, config, schedule, cascade_plan, chunk_seed(seed, index), count, chunk_labels)

    started = time.perf_counter()
    workers = workers or worker_count()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(starts))) as pool:
            chunks = list(pool.map(run, range(len(starts))))
    else:
        chunks = [run(index) for index in range(len(starts))]
    elapsed = time.perf_counter() - started

    stages = [np.concatenate([chunk[i] for chunk in chunks]) for i in range(len(chunks[0]))]
    return Generation(final=stages[-1], stages=stages, labels=labels, seconds=elapsed)


def run_sample(config: RunConfig, checkpoint_path: str, n: int, seed: int, out_dir: str,
               label: Optional[int] = None) -> List[str]:
    """
    Write n final images plus every per-stage pivot as PNG, and a provenance sidecar

    Returns:
        Paths of the PNG files written
    """
    set_default_dtype(config.precision)
    cascade_plan = build_plan(config)
    loaded = load_arm(config, checkpoint_path, cascade_plan)
    labels = conditioning_labels(config, None if label is None else np.asarray([label]), n)
    generation = generate(loaded, config, n, seed, labels, cascade_plan=cascade_plan)

    meta = provenance(config, seed=seed, arm=loaded.name, checkpoint_sha256=loaded.checkpoint_hash)
    written = []
    for i in range(n):
        prefix = os.path.join(out_dir, f"sample_s{seed}_{i:03d}")
        for r, stage in enumerate(generation.stages[:-1]):
            path = f"{prefix}_stage{r}.png"
            save_png(stage[i], path, dict(meta, stage=r))
            written.append(path)
        path = f"{prefix}_final.png"
        save_png(generation.final[i], path, dict(meta, stage="final"))
        written.append(path)

    sidecar = dict(meta, n=n, labels=None if labels is None else labels.tolist(),
                   files=[os.path.basename(p) for p in written])
    with open(os.path.join(out_dir, "provenance.json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    get_run_logger().log_operation(RunEventType.SAMPLE_WRITTEN, f"Wrote {len(written)} PNG files to {out_dir}",
                                   details={"n": n, "seed": seed, "arm": loaded.name}, run_id=meta["config_hash"])
    return written


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def compute_report(arm: str, generation: Generation, reference: np.ndarray, reference_labels: np.ndarray,
                   config: RunConfig, checkpoint_hash: str = "", sample_seed: Optional[int] = None,
                   extractor: Optional[FeatureExtractor] = None) -> MetricReport:
    """All proxy metrics and count statistics of one generated set against a reference set"""
    ev = config.eval
    extractor = extractor or FeatureExtractor(ev.extractor_seed)
    feats_gen = extractor.features(generation.final, ev.batch)
    feats_ref = extractor.features(reference, ev.batch)
    patch_seed = ev.seed + 1
    pfid, pkid = patch_metrics(generation.final, reference, config.patch_size, ev.n_patches, patch_seed, extractor)
    labels = generation.labels if generation.labels is not None else np.resize(reference_labels, len(generation.final))
    accuracy, mae = count_statistics(generation.final, labels, config.cascade.base[0])
    per_image = generation.seconds / max(len(generation.final), 1)
    return MetricReport(
        arm=arm,
        proxy_fid_r=frechet_distance(feats_gen, feats_ref),
        proxy_kid_r=kernel_distance(feats_gen, feats_ref),
        proxy_pfid_r=pfid,
        proxy_pkid_r=pkid,
        proxy_fid_b=base_consistency(generation.base, generation.final, extractor),
        count_accuracy=accuracy,
        count_mae=mae,
        n_generated=len(generation.final),
        n_reference=len(reference),
        extractor_seed=ev.extractor_seed,
        sample_seed=ev.seed if sample_seed is None else sample_seed,
        patch_seed=patch_seed,
        config_hash=config_hash(config),
        checkpoint_hash=checkpoint_hash,
        code_version=CODE_VERSION,
        extra={"seconds_per_image": per_image},
    )


def run_eval(config: RunConfig, checkpoint_path: str, out_dir: Optional[str] = None, n: Optional[int] = None,
             seed: Optional[int] = None) -> MetricReport:
    """Generate eval.n_samples images and score them against the held-out split"""
    started = time.perf_counter()
    set_default_dtype(config.precision)
    cascade_plan = build_plan(config)
    _, eval_set = build_datasets(config)
    n = n or config.eval.n_samples
    seed = config.eval.seed if seed is None else seed

    n_reference = min(len(eval_set), config.eval.n_samples)
    reference = eval_set.images(range(n_reference), config.cascade.target)
    reference_labels = eval_set.labels(range(n_reference))

    loaded = load_arm(config, checkpoint_path, cascade_plan)
    labels = conditioning_labels(config, reference_labels, n)
    generation = generate(loaded, config, n, seed, labels, cascade_plan=cascade_plan)
    report = compute_report(loaded.name, generation, reference, reference_labels, config,
                            loaded.checkpoint_hash, seed)
    report.runtime_seconds = time.perf_counter() - started

    write_metric_report(report, out_dir or config.output_dir)
    get_run_logger().log_operation(RunEventType.EVAL_REPORT, f"Evaluated arm {loaded.name}",
                                   details={"report_hash": report.report_hash(), "proxy_fid_r": report.proxy_fid_r},
                                   run_id=report.config_hash)
    return report


# --------------------------------------------------------------------------
# Comparison
# --------------------------------------------------------------------------

@dataclass
class ArmEntry:
    name: str
    checkpoint: str
    overrides: List[str] = field(default_factory=list)


@dataclass
class ExperimentDescriptor:
    """
    Expected JSON format:
    {
        "config": "configs/default.json",
        "overrides": ["eval.n_samples=200"],
        "out": "runs/compare",
        "arms": [
            {"name": "direct", "checkpoint": "runs/base/checkpoints/step_020000.ckpt"},
            {"name": "ours_t", "checkpoint": "runs/ours_t/checkpoints/step_002000.ckpt"}
        ],
        "full_ft_budget": ["runs/full_ft/checkpoints/step_000500.ckpt", ...]
    }
    """

    config: Optional[str]
    arms: List[ArmEntry]
    out: str = "runs/compare"
    overrides: List[str] = field(default_factory=list)
    full_ft_budget: List[str] = field(default_factory=list)

    @classmethod
    def parse(cls, path: str) -> "ExperimentDescriptor":
        if not os.path.exists(path):
            raise ConfigError("descriptor", f"file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("descriptor", f"invalid JSON: {e}") from None
        if not isinstance(data.get("arms"), list) or not data["arms"]:
            raise ConfigError("arms", "descriptor must list at least one arm")
        arms = []
        for index, entry in enumerate(data["arms"]):
            if "name" not in entry or "checkpoint" not in entry:
                raise ConfigError(f"arms.{index}", "each arm needs a name and a checkpoint")
            arms.append(ArmEntry(entry["name"], entry["checkpoint"], list(entry.get("overrides", []))))
        base_dir = os.path.dirname(os.path.abspath(path))
        config = data.get("config")
        if config and not os.path.isabs(config) and not os.path.exists(config):
            config = os.path.join(base_dir, config)
        return cls(config=config, arms=arms, out=data.get("out", "runs/compare"),
                   overrides=list(data.get("overrides", [])), full_ft_budget=list(data.get("full_ft_budget", [])))

    def missing_checkpoints(self) -> List[str]:
        missing = [f"{arm.name} ({arm.checkpoint})" for arm in self.arms if not os.path.exists(arm.checkpoint)]
        missing += [f"full_ft budget ({path})" for path in self.full_ft_budget if not os.path.exists(path)]
        return missing


COMPARE_COLUMNS = ["arm", "trainable_params", "steps", "train_seconds", "infer_time", "proxy_fid_r",
                   "proxy_kid_r", "proxy_pfid_r", "proxy_fid_b", "count_accuracy", "count_mae"]
LOWER_IS_BETTER = ("proxy_fid_r", "proxy_kid_r", "proxy_pfid_r", "proxy_fid_b", "count_mae")


@dataclass
class CompareResult:
    rows: List[Dict[str, Any]]
    text: str
    csv_path: str
    text_path: str
    efficiency_ratio: Optional[float] = None
    reports: Dict[str, MetricReport] = field(default_factory=dict)


def _train_seconds(checkpoint_path: str) -> Optional[float]:
    summary = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(checkpoint_path))), "train_summary.json")
    if not os.path.exists(summary):
        return None
    with open(summary, "r", encoding="utf-8") as f:
        return json.load(f).get("wall_clock_seconds")


def efficiency_ratio(target_fid: float, target_steps: int,
                     budget: Sequence[Tuple[int, float]]) -> Optional[float]:
    """
    Steps full fine-tuning needs to first reach target_fid, over target_steps

    Args:
        target_fid: proxy_fid_r of the tuned cascade
        target_steps: Steps the tuned cascade trained for
        budget: (steps, proxy_fid_r) of full fine-tuning checkpoints

    Returns:
        The ratio, or None when no budget point reaches target_fid
    """
    for steps, fid in sorted(budget):
        if fid <= target_fid:
            return steps / max(target_steps, 1)
    return None


def run_compare(descriptor_path: str, progress: bool = False,
                overrides: Optional[Sequence[str]] = None) -> CompareResult:
    """
    Evaluate every arm of a descriptor and write compare.csv and compare.txt

    Overrides given here apply to every arm, after the descriptor and per-arm overrides.

    Raises:
        CheckpointError: Listing every arm whose checkpoint is missing
    """
    descriptor = ExperimentDescriptor.parse(descriptor_path)
    overrides = list(overrides or [])
    missing = descriptor.missing_checkpoints()
    if missing:
        raise CheckpointError(f"Missing checkpoints for: {', '.join(missing)}")

    rows: List[Dict[str, Any]] = []
    reports: Dict[str, MetricReport] = {}
    hashes = set()
    for entry in descriptor.arms:
        config = load_config(descriptor.config, descriptor.overrides + entry.overrides + overrides, arm=entry.name)
        hashes.add(config_hash(config))
        eval_dir = os.path.join(descriptor.out, entry.name)
        report = run_eval(config, entry.checkpoint, eval_dir)
        cascade_plan = build_plan(config)
        loaded = load_arm(config, entry.checkpoint, cascade_plan)
        reports[entry.name] = report
        rows.append({
            "arm": entry.name,
            "trainable_params": trainable_count(loaded, cascade_plan),
            "steps": loaded.checkpoint.step,
            "train_seconds": _train_seconds(entry.checkpoint),
            "seconds_per_image": report.extra.get("seconds_per_image"),
            "proxy_fid_r": report.proxy_fid_r,
            "proxy_kid_r": report.proxy_kid_r,
            "proxy_pfid_r": report.proxy_pfid_r,
            "proxy_fid_b": report.proxy_fid_b,
            "count_accuracy": report.count_accuracy,
            "count_mae": report.count_mae,
        })

    direct = reports.get(ArmKind.DIRECT.value)
    for row in rows:
        per_image = row.pop("seconds_per_image")
        if direct is not None and direct.extra.get("seconds_per_image"):
            row["infer_time"] = f"{per_image / direct.extra['seconds_per_image']:.2f}x"
        else:
            row["infer_time"] = per_image

    ratio = None
    if descriptor.full_ft_budget and ArmKind.OURS_T.value in reports:
        ours = next(r for r in rows if r["arm"] == ArmKind.OURS_T.value)
        budget = []
        for index, path in enumerate(descriptor.full_ft_budget):
            config = load_config(descriptor.config, descriptor.overrides + overrides, arm=ArmKind.FULL_FT.value)
            report = run_eval(config, path, os.path.join(descriptor.out, f"full_ft_budget_{index}"))
            budget.append((Checkpoint.load(path).step, report.proxy_fid_r))
        ratio = efficiency_ratio(reports[ArmKind.OURS_T.value].proxy_fid_r, ours["steps"], budget)

    for name in UNIMPLEMENTED_ARMS:
        rows.append({"arm": name, **{column: NOT_IMPLEMENTED for column in COMPARE_COLUMNS[1:]}})

    csv_rows = [dict(row) for row in rows]
    for column in LOWER_IS_BETTER:
        mark_best(rows, column, lower_is_better=True)
    mark_best(rows, "count_accuracy", lower_is_better=False)

    footer = ["* best value in column"]
    if ratio is not None:
        footer.append(f"Full fine-tuning needs {ratio:.2f}x the tuned-cascade steps to reach its proxy_fid_r")
    elif descriptor.full_ft_budget:
        footer.append("Full fine-tuning did not reach the tuned-cascade proxy_fid_r within the given budget")
    footer.append(f"config_hash: {', '.join(sorted(hashes))}  code_version: {CODE_VERSION}")
    text = format_table(rows, COMPARE_COLUMNS, title="Arm comparison", footer=footer)

    os.makedirs(descriptor.out, exist_ok=True)
    csv_path = os.path.join(descriptor.out, "compare.csv")
    for row in csv_rows:
        row["config_hash"] = ";".join(sorted(hashes))
        row["code_version"] = CODE_VERSION
        row["efficiency_ratio"] = "" if ratio is None else f"{ratio:.4f}"
    write_csv(csv_path, csv_rows, COMPARE_COLUMNS + ["efficiency_ratio", "config_hash", "code_version"])
    text_path = os.path.join(descriptor.out, "compare.txt")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(text)

    get_run_logger().log_operation(RunEventType.COMPARE_TABLE, f"Compared {len(descriptor.arms)} arms",
                                   details={"arms": [a.name for a in descriptor.arms], "efficiency_ratio": ratio})
    return CompareResult(rows, text, csv_path, text_path, ratio, reports)
