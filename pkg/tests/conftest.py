import numpy as np
import pytest

from cmssl.encoders import default_encoder_spec
from cmssl.views import SynthSpec, generate_synthetic


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to every entry of array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        up = f(x)
        x[i] = orig - eps
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SynthSpec(samples_per_class=8), 0)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(SynthSpec(), 0)


@pytest.fixture(scope="session")
def default_specs(default_dataset):
    return {m.modality_id: default_encoder_spec(m) for m in default_dataset.modalities}


TINY_CONFIG = {
    "seed": 0,
    "dataset": {"synthetic": {"samples_per_class": 5, "latent_dim": 4, "pattern_resolution": 4,
                              "noise_std": {"S1": 0.5, "S2": 0.5, "NAIP": 0.5}}},
    "modalities": [
        {"name": "S1", "channels": 2, "height": 4, "width": 4, "encoder": {"hidden": [16], "output_dim": 4}},
        {"name": "S2", "channels": 2, "height": 4, "width": 4, "encoder": {"hidden": [16], "output_dim": 4}},
        {"name": "NAIP", "channels": 2, "height": 8, "width": 8,
         "encoder": {"kind": "SmallCNN", "conv_stages": [[4, 3, 1]], "output_dim": 4}},
    ],
    "optimizer": {"pretrain": {"epochs": 1, "batch_size": 16}, "finetune": {"epochs": 1, "batch_size": 16}},
    "grid": {"seeds": [0]},
}


@pytest.fixture
def tiny_config_dict():
    import copy
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config(tiny_config_dict):
    from cmssl.config import from_dict
    return from_dict(tiny_config_dict)
