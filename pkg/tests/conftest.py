import numpy as np
import pytest
import torch

from consinstancy.model import ModelConfig
from consinstancy.synthdata import SceneSpec, generate_dataset
from consinstancy.training import TrainConfig


def pytest_configure(config):
    # all reproducibility contracts assume single-threaded execution
    torch.set_num_threads(1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# small gapped scenes used across the unit tests; 32x32 keeps the training
# tests fast and is divisible by 2**n_blocks for the shrunken test net
TINY_SPEC = SceneSpec(
    height=32,
    width=32,
    particle_count_range=(2, 3),
    radius_range=(4.0, 7.0),
    seed=7,
)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_train")
    return generate_dataset(TINY_SPEC, 3, 3, root, split_name="train")


@pytest.fixture(scope="session")
def tiny_test_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_test")
    spec = SceneSpec.from_dict({**TINY_SPEC.to_dict(), "seed": 900})
    return generate_dataset(spec, 2, 0, root, split_name="test")


@pytest.fixture()
def tiny_config(tmp_path):
    """Factory for a shrunken-but-complete training config."""

    def make(variant="Inst", **overrides):
        model = ModelConfig(n_blocks=2, base_width=4, head_channels=8, variant=variant)
        kwargs = dict(
            variant=variant,
            batch_size=4,
            labeled_per_batch=2,
            max_epochs=2,
            seed=3,
            checkpoint_dir=str(tmp_path / "checkpoints"),
            model=model,
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs).validate()

    return make
