"""Shared fixtures; the trained teacher/student are session-scoped because
the desk-scale runs take minutes and several modules assert against them."""
import time
from types import SimpleNamespace

import pytest

import changekit as ck
from changekit.distill import DistillConfig, distill
from changekit.model import ModelConfig
from changekit.pretrain import PretrainConfig, pretrain

GATE_DATASET = dict(size=64, bands=4, n_timestamps=6,
                    change_fraction=0.1, season_fraction=0.2)


def desk_model_cfg(bands: int = 4, seed: int = 0) -> ModelConfig:
    """CPU-sized backbone used by the desk-scale training fixtures."""
    return ModelConfig(in_bands=bands, feature_dim=16, stem_channels=16,
                       encoder_channels=(32, 64, 128),
                       decoder_channels=(160, 80, 40), seed=seed)


def tiny_model_cfg(bands: int = 3, seed: int = 1) -> ModelConfig:
    return ModelConfig(in_bands=bands, feature_dim=8, stem_channels=8,
                       encoder_channels=(8, 12, 16), decoder_channels=(20, 12, 8),
                       seed=seed)


def tiny_pretrain_cfg(**overrides) -> PretrainConfig:
    base = dict(lr=1e-3, batch_size=4, epochs=2, crop_size=16, max_offset=4,
                pairs_per_scene=1, anchors_per_image=32, superpixel_min_size=4,
                superpixel_scale=50.0, seed=3)
    base.update(overrides)
    return PretrainConfig(**base)


@pytest.fixture(scope="session")
def gate_scenes():
    return ck.make_scene_set(8, base_seed=0, **GATE_DATASET)


@pytest.fixture(scope="session")
def heldout_scenes():
    return ck.make_scene_set(2, base_seed=1000, **GATE_DATASET)


@pytest.fixture(scope="session")
def tiny_scenes():
    return ck.make_scene_set(4, base_seed=11, size=32, bands=3, n_timestamps=4,
                             change_fraction=0.1, season_fraction=0.2)


@pytest.fixture(scope="session")
def gate_pretrain_cfg():
    return PretrainConfig.desk_scale(epochs=50, crop_size=24, seed=0,
                                     contrast_unquantized=True,
                                     pairs_per_scene=6, superpixel_scale=20.0)


@pytest.fixture(scope="session")
def trained_teacher(gate_scenes, gate_pretrain_cfg):
    start = time.monotonic()
    bundle, logs = pretrain(gate_scenes, gate_pretrain_cfg,
                            model_cfg=desk_model_cfg(seed=0))
    return SimpleNamespace(bundle=bundle, logs=logs,
                           elapsed=time.monotonic() - start)


@pytest.fixture(scope="session")
def trained_student(trained_teacher, gate_scenes):
    start = time.monotonic()
    bundle, logs = distill(trained_teacher.bundle, gate_scenes,
                           DistillConfig.desk_scale(seed=0, pairs_per_scene=4,
                                                    s_head_lr_scale=35.0))
    return SimpleNamespace(bundle=bundle, logs=logs,
                           elapsed=time.monotonic() - start)
