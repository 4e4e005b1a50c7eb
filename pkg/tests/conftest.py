import numpy as np
import pytest

from src.atlas_model import AtlasConfig, AtlasModel, Scaler, fit_atlas
from src.data import gen_toy_dependent
from src.dependence_model import DependenceConfig, fit_dependence
from src.nn_core import TrainConfig


def train_config(max_epochs=40, batch_size=64, learning_rate=1e-2, patience=20, seed=0):
    return TrainConfig(learning_rate=learning_rate, max_epochs=max_epochs, batch_size=batch_size,
                       patience=patience, seed=seed, log_every=0)


def finite_difference(loss, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss()`` with respect to every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        old = array[idx]
        array[idx] = old + eps
        up = loss()
        array[idx] = old - eps
        down = loss()
        array[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def assert_close_gradients(analytic, numeric, rtol=1e-3, atol=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    bad = np.abs(analytic - numeric) > rtol * scale + atol
    assert not bad.any(), f"gradient mismatch: {analytic[bad][:5]} vs {numeric[bad][:5]}"


@pytest.fixture
def random_atlas():
    """Factory for untrained atlases over identity-scaled covariates."""
    def make(n_covariates=3, spatial=False, width=8, priors=None, seed=0, floor=1e-6):
        names = [f"c{k + 1}" for k in range(n_covariates)]
        config = AtlasConfig(hidden_width=width, variance_floor=floor)
        return AtlasModel.initialize(names, Scaler.identity(n_covariates), spatial, config,
                                     np.random.default_rng(seed), priors)
    return make


@pytest.fixture(scope="session")
def toy_models():
    """Atlas and dependence model trained once on y = sin(c1) + c2, c2 = exp(c1) + noise."""
    dataset = gen_toy_dependent(3000, 0)
    atlas = fit_atlas(dataset, AtlasConfig(hidden_width=32, train=train_config(max_epochs=120, batch_size=64)))
    dep = fit_dependence(dataset, DependenceConfig(hidden_width=32,
                                                   train=train_config(max_epochs=300, batch_size=64, patience=50)))
    return dataset, atlas, dep
