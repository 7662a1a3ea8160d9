"""Shared fixtures: f64 precision, tiny model configs and a small on-disk dataset."""

import pytest

from gridloc.config import DataConfig, JitterParams, ModelConfig, SceneParams, TrainConfig
from gridloc.numkit import precision
from gridloc.scenes import write_dataset


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        backbone_channels=4,
        trunk_channels=4,
        roi_size_grid=8,
        roi_size_reg=4,
        heatmap_size=32,
        trunk_convs=2,
        grid="3x3",
        channels_per_point=2,
        reg_hidden=8,
    )


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(epochs=2, decay_epochs=(1,), batch_size=2, positives_per_image=4, seed=3)


@pytest.fixture
def small_scene_params() -> SceneParams:
    return SceneParams(image_size=64, max_objects=1, proposals_per_object=4)


@pytest.fixture
def small_dataset(tmp_path, small_scene_params):
    out = tmp_path / "data"
    manifest = write_dataset(out, 7, DataConfig(train_count=4, val_count=2), small_scene_params, JitterParams())
    return out, manifest
