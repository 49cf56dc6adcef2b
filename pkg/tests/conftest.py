"""
Shared fixtures: a small catalog, 32x32 episodes and a tiny model.
"""

import numpy as np
import pytest

from visact.models.schemas import (
    EncoderConfig,
    FusionConfig,
    HeadConfig,
    ModelConfig,
    SceneConfig,
    TextConfig,
)
from visact.nets.encoders import build_vocabulary
from visact.nets.model import build_model
from visact.skills.dataio import InMemoryDataset
from visact.skills.scenegen import build_catalog, generate_episode, instruction_corpus, make_splits

IMAGE_SIZE = 32


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    cache = tmp_path / "cache"
    monkeypatch.setenv("LAVAMAN_CACHE", str(cache))
    return cache


@pytest.fixture(scope="session")
def catalog():
    return build_catalog(instances_per_class=3, seed=0)


@pytest.fixture(scope="session")
def assignment(catalog):
    return make_splits(catalog, seed=0)


@pytest.fixture(scope="session")
def scene_config():
    return SceneConfig(image_size=IMAGE_SIZE)


@pytest.fixture(scope="session")
def episodes(catalog, assignment, scene_config):
    tasks = ("packing_seq", "packing_grp")
    return [
        generate_episode(tasks[seed % 2], catalog, "train", seed, assignment, scene_config)
        for seed in range(6)
    ]


@pytest.fixture(scope="session")
def heldout_episodes(catalog, assignment, scene_config):
    return [
        generate_episode("packing_seq", catalog, split, 100 + i, assignment, scene_config)
        for i, split in enumerate(("intra", "inter"))
    ]


@pytest.fixture
def dataset(episodes):
    return InMemoryDataset(episodes)


@pytest.fixture(scope="session")
def vocabulary(catalog):
    return build_vocabulary(instruction_corpus(catalog))


@pytest.fixture(scope="session")
def model_config():
    return ModelConfig(
        image_size=IMAGE_SIZE,
        encoder=EncoderConfig(embed_dim=16, depth_self=1, depth_bidir=1, heads=2, mlp_ratio=2.0, patch_size=8),
        text=TextConfig(text_dim=8, depth=1, heads=2, max_len=12),
        fusion=FusionConfig(n_fusion_stages=1, decoder_depth=1, decoder_dim=16, heads=2),
        heads=HeadConfig(affordance_channels=8, action_hidden=16, bbox_hidden=16),
    )


@pytest.fixture
def model(model_config, vocabulary):
    return build_model(model_config, vocabulary, seed=0)


@pytest.fixture
def images():
    rng = np.random.default_rng(0)
    return rng.uniform(0.0, 1.0, size=(2, IMAGE_SIZE, IMAGE_SIZE, 3)).astype(np.float32)
