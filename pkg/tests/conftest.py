"""
Shared fixtures for the SMAR test suite
"""

import pytest

from smar.config import ModalitySynthConfig, ModelConfig, SynthConfig
from smar.datagen import generate_dataset
from smar.logger import reset_log_manager


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def fresh_log_manager():
    reset_log_manager()
    yield
    reset_log_manager()


@pytest.fixture
def small_synth() -> SynthConfig:
    return SynthConfig(
        n_queries=12,
        text_dim=4,
        visual_dim=4,
        item_feature_dim=3,
        user_feature_dim=4,
        taste_dim=2,
        seed=5,
        modalities=[
            ModalitySynthConfig(name="natural", queue_min=3, queue_max=5, score_alpha=2.0, score_beta=5.0,
                                visual_rate=0.5),
            ModalitySynthConfig(name="video", queue_min=3, queue_max=5, score_alpha=8.0, score_beta=2.0),
        ],
    )


@pytest.fixture
def small_data(small_synth):
    return generate_dataset(small_synth)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        embed_dim=8,
        n_heads=2,
        n_blocks=1,
        mlp_hidden=8,
        feature_hidden=6,
        user_tokens=2,
        n_buckets=3,
        learning_rate=0.05,
        epochs=3,
        batch_queries=4,
        seed=0,
    )
