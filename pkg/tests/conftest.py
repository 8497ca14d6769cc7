import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import toonfield as tf


def tiny_config(**overrides) -> "tf.RunConfig":
    """Desk-scale config shrunk to seconds for unit tests."""
    cfg = tf.default_config()
    cfg.data.num_instances = 2
    cfg.data.poses_per_instance = 1
    cfg.render.feature_resolution = 8
    cfg.render.image_resolution = 16
    cfg.render.samples_per_ray = 12
    cfg.decoder.channels = 16
    cfg.stylefield.hidden = 16
    cfg.stylefield.mapping_width = 16
    cfg.pretrain.steps = 4
    cfg.pretrain.batch_size = 2
    cfg.pretrain.num_instances = 3
    cfg.pretrain.poses_per_instance = 1
    cfg.pretrain.holdout_instances = 2
    cfg.pretrain.holdout_poses = 1
    cfg.train.steps = 4
    cfg.train.batch_size = 2
    cfg.train.elastic_points = 16
    cfg.train.elastic_batch_samples = 1
    cfg.train.checkpoint_every = 2
    cfg.train.compile = False
    cfg.eval.holdout_pairs = 2
    cfg.eval.deformation_points = 64
    for key, value in overrides.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg.validate()


@pytest.fixture
def cfg_tiny():
    return tiny_config()


@pytest.fixture
def tiny_dataset(cfg_tiny, tmp_path):
    tf.synthesize_dataset(cfg_tiny, tmp_path / "data")
    return tf.load_dataset(tmp_path / "data")


@pytest.fixture
def sphere_field():
    """Degenerate all-zero instance: a centered sphere of radius 0.5."""
    from toonfield.scene import InstanceCode, SceneField
    return SceneField(InstanceCode(torch.zeros(64, dtype=torch.float64)),
                      dtype=torch.float64)
