"""
Shared fixtures: a tiny synthetic world and a tiny architecture so that
training-level tests finish in seconds. Full-size calibration runs are
marked ``slow`` and only run with ``--run-slow``.
"""

import pytest

from faalab.model import ArchConfig, build_model
from faalab.synthworld import WorldConfig, generate_world


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="Run the full-size calibration tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size training runs (minutes each)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_world_config():
    """24 identities split 12/6/6, 2 videos each."""
    return WorldConfig(
        num_identities=24,
        identity_split=(0.5, 0.25, 0.25),
        latent_dim=4,
        face_dim=8,
        voice_dim=6,
        videos_per_identity=2,
        faces_per_video=2,
        voices_per_video=2,
        noise_std=0.05,
        cross_modal_strength=0.9,
        seed=3,
    )


@pytest.fixture
def tiny_dataset(tiny_world_config):
    return generate_world(tiny_world_config)


@pytest.fixture
def tiny_arch():
    return ArchConfig(embed_dim=8, encoder_hidden=12, fusion_hidden=8, fusion_layers=1, fusion_heads=2)


@pytest.fixture
def tiny_model(tiny_arch, tiny_world_config):
    return build_model(tiny_arch, tiny_world_config.face_dim, tiny_world_config.voice_dim, seed=0)
