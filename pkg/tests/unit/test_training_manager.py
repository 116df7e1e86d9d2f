"""
Unit tests for the training manager and the baseline arms
"""

import csv
import json
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from src.core.denoiser import TinyUNet
from src.core.lowrank import attach_lowrank
from src.core.schedule import make_schedule
from src.core.tensor import Graph, Parameter, backward
from src.core import functional as F
from src.managers.baseline_manager import denoising_loss, direct_inference, full_finetune_step
from src.managers.cascade_manager import sample_base
from src.managers.experiment_manager import build_datasets, build_model, build_plan, build_schedule, \
    build_training_arm
from src.managers.training_manager import (METRIC_FIELDS, Adam, BaseArm, FrozenArm, FullFinetuneArm,
                                           LowRankArm, UpsamplerArm, train_loop)
from src.utils.checkpoint import Checkpoint
from src.utils.config import ArmKind
from src.utils.error_handler import NonFiniteError, ShapeError
from src.utils.invariant_checks import TINY_UNET
from src.utils.run_logger import initialize_run_logger
from tests.helpers import tiny_config


class TestAdam(unittest.TestCase):
    """Test cases for the Adam optimizer"""

    def test_first_step_size(self):
        """Test that the first update has magnitude lr in every coordinate"""
        p = Parameter(np.array([1.0, -1.0, 0.5]), dtype=np.float64)
        optimizer = Adam([p], lr=0.1)
        optimizer.step({p: np.array([2.0, -3.0, 0.1])})
        np.testing.assert_allclose(p.numpy(), [0.9, -0.9, 0.4], atol=1e-6)

    def test_minimizes_quadratic(self):
        """Test convergence on sum(p^2)"""
        p = Parameter(np.array([3.0, -2.0]), dtype=np.float64)
        optimizer = Adam([p], lr=0.1)
        for _ in range(300):
            with Graph([p]) as graph:
                loss = F.sum(F.mul(p, p))
            optimizer.step(backward(loss, graph))
        self.assertLess(np.max(np.abs(p.numpy())), 0.2)

    def test_missing_gradient_skipped(self):
        """Test that parameters without a gradient stay put"""
        a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
        Adam([a, b], lr=0.1).step({a: np.ones(2)})
        np.testing.assert_array_equal(b.numpy(), np.ones(2))


class TestBaselines(unittest.TestCase):
    """Test cases for direct inference and the denoising loss"""

    def setUp(self):
        self.schedule = make_schedule("linear", T=50, K=35)
        self.model = TinyUNet(TINY_UNET, seed=0)

    def test_direct_inference_at_base_matches_sample_base(self):
        """Test that direct inference at the base resolution is stage-0 sampling"""
        direct = direct_inference(self.model, (8, 8), self.schedule, c=1, seed=4, ddim_steps=3)
        base = sample_base(self.model, (8, 8), self.schedule, c=1, seed=4, ddim_steps=3)
        np.testing.assert_array_equal(direct.numpy(), base.numpy())

    def test_direct_inference_target_shape(self):
        """Test sampling straight at a larger resolution"""
        out = direct_inference(self.model, (16, 24), self.schedule, seed=0, ddim_steps=2, batch=2)
        self.assertEqual(out.shape, (2, 3, 16, 24))

    def test_direct_inference_indivisible(self):
        """Test a resolution the UNet cannot downsample"""
        with self.assertRaises(ShapeError):
            direct_inference(self.model, (9, 9), self.schedule, ddim_steps=1)

    def test_denoising_loss_resolution(self):
        """Test the resolution guard"""
        batch = (np.zeros((1, 3, 8, 8)), np.array([1]))
        with self.assertRaises(ShapeError):
            denoising_loss(self.model, batch, self.schedule, np.random.default_rng(0), resolution=(16, 16))

    def test_full_finetune_step_changes_weights(self):
        """Test that one step moves base weights"""
        before = self.model.conv_out.weight.numpy().copy()
        optimizer = Adam(self.model.trainable_parameters(), lr=1e-2)
        batch = (np.random.default_rng(0).uniform(-1, 1, size=(2, 3, 8, 8)), np.array([0, 1]))
        loss = full_finetune_step(self.model, batch, self.schedule, np.random.default_rng(1), optimizer)
        self.assertTrue(np.isfinite(loss))
        self.assertFalse(np.array_equal(before, self.model.conv_out.weight.numpy()))

    def test_lowrank_loss_tracks_only_adapters(self):
        """Test that the low-rank objective records adapter parameters only"""
        composite = attach_lowrank(self.model, rank=2)
        batch = (np.zeros((1, 3, 8, 8)), np.array([1]))
        _, graph = denoising_loss(composite, batch, self.schedule, np.random.default_rng(0))
        adapter_ids = {id(p) for _, p in composite.adapter_parameters()}
        self.assertEqual({id(p) for p in graph.trainable}, adapter_ids)


class TestTrainLoop(unittest.TestCase):
    """Test cases for train_loop and the arm builders"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        initialize_run_logger(log_directory=os.path.join(self.test_dir, "logs"))

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def _run(self, arm_name, out_name, *overrides):
        out_dir = os.path.join(self.test_dir, out_name)
        config = tiny_config(out_dir, *overrides, arm=arm_name)
        model = build_model(config)
        arm = build_training_arm(config, model, build_schedule(config), build_plan(config))
        train_set, eval_set = build_datasets(config)
        return config, arm, train_loop(arm, train_set, config, out_dir, eval_dataset=eval_set, progress=False)

    def test_zero_steps_writes_initial_checkpoint_only(self):
        """Test steps=0 emits one checkpoint and a header-only CSV"""
        _, _, result = self._run("ours_t", "zero", "train.steps=0")
        self.assertEqual(len(result.checkpoints), 1)
        self.assertTrue(result.checkpoints[0].endswith("step_000000.ckpt"))
        with open(result.metrics_path, newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows, [METRIC_FIELDS])

    def test_metric_csv_is_deterministic(self):
        """Test that identical config and seed give identical metric CSVs"""
        _, _, first = self._run("ours_t", "a")
        _, _, second = self._run("ours_t", "b")
        with open(first.metrics_path) as f1, open(second.metrics_path) as f2:
            self.assertEqual(f1.read(), f2.read())
        first_group = Checkpoint.load(first.checkpoint_path).groups["upsampler_stage_1"]
        second_group = Checkpoint.load(second.checkpoint_path).groups["upsampler_stage_1"]
        self.assertEqual(sorted(first_group), sorted(second_group))
        for name, array in first_group.items():
            np.testing.assert_array_equal(array, second_group[name], err_msg=name)

    def test_upsampler_arm_freezes_base(self):
        """Test that the base group is byte-identical after tuning"""
        config, arm, result = self._run("ours_t", "frozen")
        initial = Checkpoint.load(result.checkpoints[0])
        final = Checkpoint.load(result.checkpoint_path)
        self.assertEqual(initial.group_bytes("base"), final.group_bytes("base"))
        self.assertNotEqual(initial.group_bytes("upsampler_stage_1"), final.group_bytes("upsampler_stage_1"))
        self.assertIsInstance(arm, UpsamplerArm)

    def test_checkpoint_schedule(self):
        """Test checkpoints at step 0, every checkpoint_every steps and the end"""
        _, _, result = self._run("ours_t", "sched")
        names = [os.path.basename(p) for p in result.checkpoints]
        self.assertEqual(names, ["step_000000.ckpt", "step_000002.ckpt", "step_000004.ckpt"])

    def test_metric_rows(self):
        """Test one row per step with eval losses on eval steps"""
        _, _, result = self._run("ours_t", "rows")
        with open(result.metrics_path, newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([int(r["step"]) for r in rows], [1, 2, 3, 4])
        self.assertEqual(rows[0]["eval_loss"], "")
        self.assertNotEqual(rows[1]["eval_loss"], "")
        self.assertEqual({r["phase"] for r in rows}, {"upsampler_stage_1"})

    def test_summary_and_curve(self):
        """Test that the run summary and loss curve are written"""
        config, _, result = self._run("full_ft", "summary")
        out_dir = os.path.dirname(result.metrics_path)
        self.assertTrue(os.path.exists(os.path.join(out_dir, "loss_curve.svg")))
        with open(os.path.join(out_dir, "train_summary.json")) as f:
            summary = json.load(f)
        self.assertEqual(summary["arm"], "full_ft")
        self.assertEqual(summary["steps"], 4)
        self.assertIn("wall_clock_seconds", summary)

    def test_arm_builders(self):
        """Test that each arm name builds the matching training arm"""
        expected = {"base": BaseArm, "full_ft": FullFinetuneArm, "lowrank": LowRankArm,
                    "ours_t": UpsamplerArm, "ours_tf": FrozenArm, "direct": FrozenArm}
        for name, cls in expected.items():
            with self.subTest(arm=name):
                config = tiny_config(self.test_dir, arm=name)
                arm = build_training_arm(config, build_model(config), build_schedule(config), build_plan(config))
                self.assertIs(type(arm), cls)
                self.assertEqual(arm.kind, ArmKind(name))

    def test_census_of_upsampler_arm(self):
        """Test that the census counts only the stack as trainable"""
        config = tiny_config(self.test_dir, arm="ours_t")
        model = build_model(config)
        arm = build_training_arm(config, model, build_schedule(config), build_plan(config))
        census = arm.census()
        self.assertEqual(census["trainable"], sum(s.parameter_count() for s in arm.stacks))
        self.assertEqual(census["per_group"]["base"], model.parameter_count())

    def test_frozen_arm_writes_initial_checkpoint(self):
        """Test that zero-parameter arms only write the step-0 checkpoint"""
        _, _, result = self._run("ours_tf", "tf")
        self.assertEqual(len(result.checkpoints), 1)
        self.assertEqual(result.steps, 0)

    def test_non_finite_loss_writes_diagnostic(self):
        """Test that a NaN loss stops training with a diagnostic dump"""
        out_dir = os.path.join(self.test_dir, "nan")
        config = tiny_config(out_dir, arm="full_ft")
        arm = build_training_arm(config, build_model(config), build_schedule(config), build_plan(config))
        train_set, _ = build_datasets(config)

        def exploding(*args, **kwargs):
            raise NonFiniteError("mse_loss produced non-finite values")

        with patch("src.managers.training_manager.denoising_loss", side_effect=exploding):
            with self.assertRaises(NonFiniteError) as ctx:
                train_loop(arm, train_set, config, out_dir, progress=False)
        path = ctx.exception.diagnostic_path
        self.assertTrue(os.path.exists(path))
        with open(path) as f:
            snapshot = json.load(f)
        self.assertEqual(snapshot["step"], 1)
        self.assertIn("base", snapshot["parameters"])


if __name__ == '__main__':
    unittest.main()
