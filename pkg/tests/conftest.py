"""
Shared fixtures: a tiny run config, model and dataset
"""
import os
import sys
import tempfile
from pathlib import Path

# Keep test logs out of the project tree; must be set before hybridtower is imported
os.environ.setdefault("HYBRIDTOWER_LOG_DIR", tempfile.mkdtemp(prefix="hybridtower-test-logs-"))
os.environ.pop("HYBRIDTOWER_SEED", None)
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from hybridtower.config import ModelDims, RunConfig, TrainConfig
from hybridtower.data.synthetic import SyntheticSpec, generate
from hybridtower.models.hybrid_tower import HybridTowerModel

TINY_OVERRIDES = [
    "data.n_pairs=40",
    "data.z_dim=4",
    "data.d_in=8",
    "data.frames=3",
    "data.patches=4",
    "data.p_info=1",
    "data.text_len=4",
    "model.width=16",
    "model.heads=2",
    "model.video_depth=1",
    "model.text_depth=1",
    "model.mlp_ratio=2",
    "model.max_text_len=6",
    "its.k=3",
    "generator.depth=1",
    "train.batch_size=8",
    "train.stage0_steps=3",
    "train.stage1_steps=3",
    "train.stage2_steps=3",
    "train.eval_every=2",
    "train.patience=5",
    "serving.batch_size=7",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return RunConfig.load(overrides=TINY_OVERRIDES)


@pytest.fixture
def tiny_dims(tiny_config):
    return ModelDims.from_config(tiny_config)


@pytest.fixture
def tiny_train_config(tiny_config):
    return TrainConfig.from_config(tiny_config)


@pytest.fixture
def tiny_model(tiny_dims):
    return HybridTowerModel(tiny_dims)


@pytest.fixture
def tiny_dataset(tiny_config):
    return generate(SyntheticSpec.from_config(tiny_config))
