"""
Unit tests for the experiment manager: train, sample, eval, export and compare
"""

import json
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from src.managers.experiment_manager import (ExperimentDescriptor, build_datasets, build_plan, chunk_seed,
                                             conditioning_labels, efficiency_ratio, export_groups, generate,
                                             load_arm, run_compare, run_eval, run_sample, run_train,
                                             trainable_count, worker_count)
from src.utils.checkpoint import Checkpoint
from src.utils.config import ArmKind
from src.utils.error_handler import CheckpointError, ConfigError
from src.utils.report_generator import read_csv
from src.utils.run_logger import initialize_run_logger
from src.utils.scenes import MANIFEST_FILE, load_manifest_specs, make_corpus, render, save_png
from tests.helpers import tiny_config, write_tiny_config


class TestHelpers(unittest.TestCase):
    """Test cases for seeds, worker counts and labels"""

    def test_worker_count_cap(self):
        """Test that CASCADE_THREADS caps the pool"""
        with patch.dict(os.environ, {"CASCADE_THREADS": "1"}):
            self.assertEqual(worker_count(), 1)

    def test_worker_count_invalid(self):
        """Test a non-integer thread cap"""
        with patch.dict(os.environ, {"CASCADE_THREADS": "many"}):
            with self.assertRaises(ConfigError):
                worker_count()

    def test_chunk_seeds(self):
        """Test per-chunk seeds are stable and distinct"""
        self.assertEqual(chunk_seed(7, 0), chunk_seed(7, 0))
        self.assertEqual(len({chunk_seed(7, i) for i in range(10)}), 10)

    def test_conditioning_labels(self):
        """Test label cycling with and without a source"""
        config = tiny_config("unused")
        np.testing.assert_array_equal(conditioning_labels(config, None, 5), [1, 2, 3, 1, 2])
        np.testing.assert_array_equal(conditioning_labels(config, np.array([2]), 3), [2, 2, 2])
        self.assertIsNone(conditioning_labels(tiny_config("unused", "unet.num_classes=0"), None, 3))

    def test_efficiency_ratio(self):
        """Test the first budget point reaching the target"""
        budget = [(1500, 1.0), (500, 3.0), (1000, 1.5)]
        self.assertEqual(efficiency_ratio(1.6, 500, budget), 2.0)
        self.assertIsNone(efficiency_ratio(0.5, 500, budget))


class TestCorpusDatasets(unittest.TestCase):
    """Test cases for build_datasets over the scene corpus"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        initialize_run_logger(log_directory=os.path.join(self.test_dir, "logs"))

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_manifest_in_cache_dir(self):
        """Test that the manifest lands beside the cached PNG files and lists every scene"""
        cache_dir = os.path.join(self.test_dir, "cache")
        config = tiny_config(self.test_dir, "data.n_train=3", "data.n_eval=1", f"data.cache_dir={cache_dir}")
        train, held_out = build_datasets(config)

        path = os.path.join(cache_dir, MANIFEST_FILE)
        self.assertTrue(os.path.exists(path))
        with open(path) as f:
            manifest = json.load(f)
        self.assertEqual(manifest["seed"], config.data.corpus_seed)
        self.assertEqual((manifest["n_train"], manifest["n_eval"]), (3, 1))
        self.assertEqual(manifest["splits"], {"train": [0, 3], "eval": [3, 4]})
        self.assertEqual(len(manifest["cached_files"]), 8)

        specs = load_manifest_specs(path)
        self.assertEqual([s.spec_hash() for s in specs],
                         [s.spec_hash() for s in train.specs + held_out.specs])

    def test_manifest_in_run_dir_without_cache(self):
        """Test the fallback location when no cache directory is configured"""
        out_dir = os.path.join(self.test_dir, "run")
        config = tiny_config(out_dir, "data.n_train=3", "data.n_eval=1")
        train, _ = build_datasets(config, out_dir)

        specs = load_manifest_specs(os.path.join(out_dir, MANIFEST_FILE))
        self.assertEqual(len(specs), 4)
        self.assertEqual(specs[0].spec_hash(), train.specs[0].spec_hash())

    def test_no_manifest_without_destination(self):
        """Test that nothing is written when neither location is given"""
        build_datasets(tiny_config(self.test_dir, "data.n_train=3", "data.n_eval=1"))
        self.assertFalse(os.path.exists(os.path.join(self.test_dir, MANIFEST_FILE)))


class TestPngDatasets(unittest.TestCase):
    """Test cases for build_datasets over a PNG directory"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        initialize_run_logger(log_directory=os.path.join(self.test_dir, "logs"))

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_png_directory_split(self):
        """Test that a tenth of the files, at most n_eval, is held out"""
        png_dir = os.path.join(self.test_dir, "pngs")
        for i, spec in enumerate(make_corpus(0, 20, 1).train.specs):
            save_png(render(spec, 16), os.path.join(png_dir, f"{i:02d}.png"))
        train, held_out = build_datasets(tiny_config(self.test_dir, f"data.png_dir={png_dir}"))
        self.assertEqual((len(train), len(held_out)), (18, 2))
        self.assertEqual(held_out.images([0], (8, 8)).shape, (1, 3, 8, 8))


class TestExperimentRuns(unittest.TestCase):
    """End-to-end runs on the tiny config"""

    @classmethod
    def setUpClass(cls):
        cls.test_dir = tempfile.mkdtemp()
        initialize_run_logger(log_directory=os.path.join(cls.test_dir, "logs"))
        base_dir = os.path.join(cls.test_dir, "base")
        cls.base_result = run_train(tiny_config(base_dir, "train.steps=2", arm="base"), progress=False)
        cls.base_ckpt = cls.base_result.checkpoint_path

        cls.ours_dir = os.path.join(cls.test_dir, "ours_t")
        cls.config = tiny_config(cls.ours_dir, f"train.base_checkpoint={cls.base_ckpt}", arm="ours_t")
        cls.ours_result = run_train(cls.config, progress=False)
        cls.ours_ckpt = cls.ours_result.checkpoint_path

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.test_dir, ignore_errors=True)

    def _dir(self, name):
        return os.path.join(self.test_dir, self._testMethodName, name)

    def test_train_artifacts(self):
        """Test that training restores base weights and writes its config"""
        self.assertTrue(os.path.exists(os.path.join(self.ours_dir, "config.json")))
        base = Checkpoint.load(self.base_ckpt)
        tuned = Checkpoint.load(self.ours_ckpt)
        self.assertEqual(base.group_names(), ["base"])
        self.assertEqual(tuned.group_names(), ["base", "upsampler_stage_1"])
        for name, array in base.groups["base"].items():
            np.testing.assert_array_equal(array, tuned.groups["base"][name], err_msg=name)

    def test_sample_is_reproducible(self):
        """Test that the same seed writes byte-identical PNG files"""
        first = run_sample(self.config, self.ours_ckpt, 2, 3, self._dir("a"))
        second = run_sample(self.config, self.ours_ckpt, 2, 3, self._dir("b"))
        self.assertEqual([os.path.basename(p) for p in first],
                         ["sample_s3_000_stage0.png", "sample_s3_000_final.png",
                          "sample_s3_001_stage0.png", "sample_s3_001_final.png"])
        for a, b in zip(first, second):
            with open(a, "rb") as fa, open(b, "rb") as fb:
                self.assertEqual(fa.read(), fb.read())
        with open(os.path.join(self._dir("a"), "provenance.json")) as f:
            sidecar = json.load(f)
        self.assertEqual(sidecar["arm"], "ours_t")
        self.assertEqual(sidecar["seed"], 3)

    def test_tuning_free_needs_only_base(self):
        """Test sampling ours_tf from a base-only checkpoint"""
        config = tiny_config(self._dir("tf"), arm="ours_tf")
        written = run_sample(config, self.base_ckpt, 1, 0, self._dir("tf"), label=2)
        self.assertEqual(len(written), 2)

    def test_tuned_arm_needs_upsampler_group(self):
        """Test that ours_t refuses a checkpoint without upsampler weights"""
        with self.assertRaises(CheckpointError):
            load_arm(self.config, self.base_ckpt)

    def test_export_and_reload_upsampler(self):
        """Test a standalone upsampler export combined with the base checkpoint"""
        out_path = self._dir("stage1.ckpt")
        export_groups(self.ours_ckpt, ["upsampler_stage_1"], out_path)
        self.assertEqual(Checkpoint.load(out_path).group_names(), ["upsampler_stage_1"])
        from_export = load_arm(self.config, out_path)
        from_full = load_arm(self.config, self.ours_ckpt)
        for (name, a), (_, b) in zip(from_export.stacks[0].named_parameters(),
                                     from_full.stacks[0].named_parameters()):
            np.testing.assert_array_equal(a.numpy(), b.numpy(), err_msg=name)

    def test_generation_independent_of_workers(self):
        """Test that chunk seeding makes the thread count irrelevant"""
        loaded = load_arm(self.config, self.ours_ckpt)
        one = generate(loaded, self.config, 4, seed=1, workers=1)
        two = generate(loaded, self.config, 4, seed=1, workers=2)
        np.testing.assert_array_equal(one.final, two.final)
        self.assertEqual(one.final.shape, (4, 3, 16, 16))
        self.assertEqual(one.base.shape, (4, 3, 8, 8))

    def test_trainable_count(self):
        """Test the trainable parameters reported for the tuned arm"""
        loaded = load_arm(self.config, self.ours_ckpt)
        self.assertEqual(trainable_count(loaded, build_plan(self.config)), loaded.stacks[0].parameter_count())
        self.assertEqual(loaded.kind, ArmKind.OURS_T)

    def test_eval_report_is_repeatable(self):
        """Test that two evaluations give the same report hash"""
        out_dir = self._dir("eval")
        first = run_eval(self.config, self.ours_ckpt, out_dir)
        second = run_eval(self.config, self.ours_ckpt, out_dir)
        self.assertEqual(first.report_hash(), second.report_hash())
        self.assertEqual(first.n_generated, 4)
        self.assertTrue(np.isfinite(first.proxy_fid_r))
        self.assertTrue(os.path.exists(os.path.join(out_dir, "eval_ours_t.json")))
        self.assertEqual(len(read_csv(os.path.join(out_dir, "eval_reports.csv"))), 2)

    def test_compare(self):
        """Test a two-arm comparison with placeholder rows"""
        config_path = write_tiny_config(self._dir("config.json"), self.ours_dir)
        out_dir = self._dir("compare")
        descriptor = self._dir("experiment.json")
        with open(descriptor, "w") as f:
            json.dump({"config": config_path, "out": out_dir,
                       "arms": [{"name": "direct", "checkpoint": self.base_ckpt},
                                {"name": "ours_t", "checkpoint": self.ours_ckpt,
                                 "overrides": [f"train.base_checkpoint={self.base_ckpt}"]}]}, f)
        result = run_compare(descriptor)
        self.assertEqual([row["arm"] for row in result.rows], ["direct", "ours_t", "attn_sf", "scalecrafter"])
        self.assertIn("Arm comparison", result.text)
        self.assertIsNone(result.efficiency_ratio)
        rows = read_csv(result.csv_path)
        self.assertEqual(rows[0]["trainable_params"], "0")
        self.assertTrue(rows[1]["infer_time"].endswith("x"))

    def test_compare_overrides_apply_to_every_arm(self):
        """Test that caller overrides reach each arm's config"""
        config_path = write_tiny_config(self._dir("config.json"), self.ours_dir)
        descriptor = self._dir("experiment_seeded.json")
        with open(descriptor, "w") as f:
            json.dump({"config": config_path, "out": self._dir("compare_seeded"),
                       "arms": [{"name": "direct", "checkpoint": self.base_ckpt}]}, f)
        result = run_compare(descriptor, overrides=["eval.seed=11"])
        self.assertEqual(result.reports["direct"].sample_seed, 11)

    def test_compare_missing_checkpoint(self):
        """Test that every missing checkpoint is listed before any work"""
        descriptor = self._dir("experiment.json")
        os.makedirs(os.path.dirname(descriptor), exist_ok=True)
        with open(descriptor, "w") as f:
            json.dump({"arms": [{"name": "ours_t", "checkpoint": self._dir("absent.ckpt")},
                                {"name": "lowrank", "checkpoint": self._dir("gone.ckpt")}]}, f)
        with self.assertRaises(CheckpointError) as ctx:
            run_compare(descriptor)
        self.assertIn("ours_t", str(ctx.exception))
        self.assertIn("lowrank", str(ctx.exception))

    def test_descriptor_needs_arms(self):
        """Test an empty arm list"""
        descriptor = self._dir("empty.json")
        os.makedirs(os.path.dirname(descriptor), exist_ok=True)
        with open(descriptor, "w") as f:
            json.dump({"arms": []}, f)
        with self.assertRaises(ConfigError):
            ExperimentDescriptor.parse(descriptor)


if __name__ == '__main__':
    unittest.main()
