import numpy as np
import pytest
import torch

from utils.config import ExperimentConfig
from utils.datasets import make_blobs
from utils.mask_engine import DenseLayer, FrozenModel, ModelSpec, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_config(tmp_path):
    """Four clients, three rounds, d = 8 * 8 = 64 maskable weights"""
    config = ExperimentConfig()
    config.federation.clients = 4
    config.federation.rounds = 3
    config.data.dim = 8
    config.data.samples = 400
    config.data.test_samples = 100
    config.model.hidden = (8,)
    config.training.batch_size = 32
    config.protocol.bound_trials = 50
    config.protocol.size_fallback = False
    config.run.output_dir = str(tmp_path / "run")
    return config.validate()


@pytest.fixture
def small_model():
    return init_model(ModelSpec(input_dim=8, hidden=(16, 16), classes=3), seed=7)


@pytest.fixture
def blobs():
    return make_blobs(classes=2, dim=8, samples=600, noise=1.0, seed=3)


@pytest.fixture
def one_weight_model():
    """Builder for x -> tanh(m * w * x + b) -> (head_0 h, head_1 h), one maskable weight"""
    def build(w=1.0, b=0.0, head=(-5.0, 5.0)):
        layer = DenseLayer(torch.tensor([[w]], dtype=torch.float64), torch.tensor([b], dtype=torch.float64))
        head_layer = DenseLayer(torch.tensor([[head[0]], [head[1]]], dtype=torch.float64),
                                torch.zeros(2, dtype=torch.float64))
        return FrozenModel((layer,), (True,), head_layer, ModelSpec(1, (1,), 2))
    return build
