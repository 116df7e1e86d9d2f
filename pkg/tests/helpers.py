"""
Shared tiny run configuration for tests

Small enough that training, sampling and evaluation finish in seconds.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.utils.config import load_config

TINY_OVERRIDES = [
    "schedule.T=50",
    "schedule.K=35",
    "unet.base_channels=8",
    "unet.levels=2",
    "unet.blocks_per_level=1",
    "unet.time_embed_dim=16",
    "unet.groupnorm_groups=4",
    "unet.channel_mults=[1, 2]",
    "unet.num_classes=4",
    "upsampler.levels=2",
    "upsampler.hidden_channels=4",
    "upsampler.time_embed_dim=8",
    "upsampler.groupnorm_groups=2",
    "cascade.base=[8, 8]",
    "cascade.target=[16, 16]",
    "train.lr=0.001",
    "train.batch=2",
    "train.steps=4",
    "train.log_every=1",
    "train.eval_every=2",
    "train.checkpoint_every=2",
    "data.n_train=8",
    "data.n_eval=4",
    "data.max_objects=3",
    "eval.n_samples=4",
    "eval.ddim_steps=2",
    "eval.batch=2",
    "eval.n_patches=2",
    'arm.exclude=["conv_in", "conv_out"]',
]


def tiny_config(out_dir, *overrides, arm=None):
    """Validated tiny RunConfig writing under out_dir"""
    return load_config(None, TINY_OVERRIDES + [f"output_dir={out_dir}"] + list(overrides), arm)


def write_tiny_config(path, out_dir, *overrides):
    """Write the tiny config as a JSON file usable with --config"""
    from src.utils.config import save_config
    save_config(tiny_config(out_dir, *overrides), path)
    return path
