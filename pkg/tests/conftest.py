import pytest
import torch

from codec import SyntheticProcess, gen_synthetic
from diffusion import HeadConfig
from model import ModelConfig
from numerics import Rng


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training comparisons")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.set_num_threads(1)
    torch.manual_seed(0)
    yield


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(layers=2, hidden=16, heads=2, max_len=16, token_dim=4, cond_dim=8, prefix_len=2)


@pytest.fixture
def tiny_head_cfg():
    return HeadConfig(layers=1, width=16, token_dim=4, time_dim=8, train_steps=50)


@pytest.fixture
def ar_process():
    return SyntheticProcess.random("gaussian-ar", 4, 3, Rng(7, "process"), radius=0.6, noise_std=0.3)


@pytest.fixture
def ar_dataset(ar_process):
    rng = Rng(7, "records")
    return [gen_synthetic(ar_process, 8, i % 3, rng) for i in range(12)]
