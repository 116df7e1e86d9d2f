"""
Unit tests for run configuration loading and validation
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from src.utils.config import (ArmKind, RunConfig, config_from_dict, config_hash, load_config, parse_override,
                              provenance, save_config, CODE_VERSION)
from src.utils.error_handler import ConfigError

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', '..', 'configs')


class TestLoadConfig(unittest.TestCase):
    """Test cases for load_config and overrides"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_defaults_valid(self):
        """Test that the built-in defaults validate"""
        config = load_config()
        self.assertEqual(config.cascade.target, (64, 64))
        self.assertEqual(config.arm.kind, ArmKind.OURS_T)

    def test_shipped_configs_valid(self):
        """Test that the shipped run configs load"""
        for name in ("default.json", "base_pretrain.json"):
            with self.subTest(config=name):
                load_config(os.path.join(CONFIG_DIR, name))

    def test_overrides_apply(self):
        """Test dotted overrides with JSON values"""
        config = load_config(None, ["train.lr=0.01", "cascade.target=[128, 128]", "arm.name=lowrank"])
        self.assertEqual(config.train.lr, 0.01)
        self.assertEqual(config.cascade.target, (128, 128))
        self.assertEqual(config.arm.kind, ArmKind.LOWRANK)

    def test_arm_argument_wins(self):
        """Test that the arm argument replaces arm.name"""
        self.assertEqual(load_config(None, ["arm.name=direct"], arm="full_ft").arm.name, "full_ft")

    def test_string_override(self):
        """Test that a non-JSON value is taken as a string"""
        config = load_config(None, ["train.base_checkpoint=runs/base/last.ckpt"])
        self.assertEqual(config.train.base_checkpoint, "runs/base/last.ckpt")

    def test_unknown_field(self):
        """Test that an unknown key names the field"""
        with self.assertRaises(ConfigError) as ctx:
            load_config(None, ["train.learning_rate=0.1"])
        self.assertEqual(ctx.exception.field, "train.learning_rate")

    def test_wrong_type(self):
        """Test that a mistyped value names the field"""
        with self.assertRaises(ConfigError) as ctx:
            load_config(None, ["train.steps=ten"])
        self.assertEqual(ctx.exception.field, "train.steps")

    def test_section_is_not_a_value(self):
        """Test overriding through a scalar"""
        with self.assertRaises(ConfigError):
            load_config(None, ["precision.x=1"])

    def test_malformed_override(self):
        """Test an override with no equals sign"""
        with self.assertRaises(ConfigError):
            parse_override("train.lr")

    def test_missing_file(self):
        """Test a config path that does not exist"""
        with self.assertRaises(ConfigError) as ctx:
            load_config(os.path.join(self.test_dir, "absent.json"))
        self.assertEqual(ctx.exception.field, "--config")

    def test_invalid_json(self):
        """Test a file that is not JSON"""
        path = os.path.join(self.test_dir, "bad.json")
        with open(path, "w") as f:
            f.write("{not json")
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_save_and_reload(self):
        """Test that a saved config reloads to the same hash"""
        config = load_config(None, ["train.steps=12"])
        path = os.path.join(self.test_dir, "run", "config.json")
        save_config(config, path)
        self.assertEqual(config_hash(load_config(path)), config_hash(config))
        with open(path) as f:
            self.assertEqual(json.load(f)["train"]["steps"], 12)


class TestValidation(unittest.TestCase):
    """Test cases for cross-field validation"""

    def assertRejects(self, field, *overrides):
        with self.assertRaises(ConfigError) as ctx:
            load_config(None, list(overrides))
        self.assertEqual(ctx.exception.field, field)

    def test_pivot_step_range(self):
        """Test K outside (0, T)"""
        self.assertRejects("schedule.K", "schedule.K=1000")
        self.assertRejects("schedule.K", "schedule.K=0")

    def test_num_classes_must_cover_counts(self):
        """Test that every object count needs a class label"""
        self.assertRejects("unet.num_classes", "unet.num_classes=4", "data.max_objects=4")

    def test_small_resolution(self):
        """Test extents below 8 pixels"""
        self.assertRejects("cascade.base", "cascade.base=[4, 4]")

    def test_single_eval_sample(self):
        """Test that FID needs at least two samples"""
        self.assertRejects("eval.n_samples", "eval.n_samples=1")

    def test_eta_range(self):
        """Test eta above one"""
        self.assertRejects("eval.eta", "eval.eta=1.5")

    def test_unknown_arm(self):
        """Test an arm name that is not recognised"""
        self.assertRejects("arm.name", "arm.name=dreambooth")

    def test_upsampler_levels(self):
        """Test more upsampler levels than the UNet has"""
        self.assertRejects("upsampler.levels", "upsampler.levels=5")

    def test_precision(self):
        """Test an unsupported float width"""
        self.assertRejects("precision", "precision=float16")

    def test_patch_defaults_to_base_height(self):
        """Test the zero patch sentinel"""
        self.assertEqual(load_config().patch_size, 32)


class TestHash(unittest.TestCase):
    """Test cases for config_hash and provenance"""

    def test_stable(self):
        """Test the hash of equal configs"""
        self.assertEqual(config_hash(RunConfig()), config_hash(config_from_dict({})))

    def test_sensitive(self):
        """Test that any field change alters the hash"""
        self.assertNotEqual(config_hash(load_config()), config_hash(load_config(None, ["eval.seed=8"])))

    def test_unet_taps_follow_upsampler(self):
        """Test the tap count handed to the denoiser"""
        config = load_config(None, ["upsampler.levels=2"])
        self.assertEqual(config.unet_config().tap_count, 2)

    def test_provenance(self):
        """Test the fields every artifact carries"""
        record = provenance(RunConfig(), arm="direct")
        self.assertEqual(record["code_version"], CODE_VERSION)
        self.assertEqual(record["arm"], "direct")
        self.assertEqual(len(record["config_hash"]), 64)


if __name__ == '__main__':
    unittest.main()
