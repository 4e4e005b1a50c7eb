import numpy as np
import pandas as pd
import pytest

from conftest import assert_close_gradients, finite_difference, train_config
from src.data import RESPONSE, SUBJECT, TIME, Dataset
from src.dependence_model import (DependenceConfig, DependenceModel, JointGaussianDependence, _ConditionalNLL,
                                  conditional_1d, conditional_2d, fit_dependence)
from src.errors import ConfigurationError, InsufficientDataError
from src.marginalization import GaussianSampler


def _covariate_dataset(c, names=None):
    names = names or [f"c{k + 1}" for k in range(c.shape[1])]
    frame = pd.DataFrame({SUBJECT: [f"s{k}" for k in range(len(c))], TIME: 0, RESPONSE: 0.0})
    for k, name in enumerate(names):
        frame[name] = c[:, k]
    return Dataset(frame, names)


@pytest.fixture(scope="module")
def gaussian_pair():
    cov = np.array([[1.0, 0.6], [0.6, 1.0]])
    rng = np.random.default_rng(0)
    c = rng.multivariate_normal([0.0, 1.0], cov, size=3000)
    dep = fit_dependence(_covariate_dataset(c), DependenceConfig(hidden_width=32,
                                                                 train=train_config(max_epochs=60, batch_size=64)))
    return dep, JointGaussianDependence(["c1", "c2"], [0.0, 1.0], cov)


@pytest.fixture
def reference():
    cov = np.array([[1.0, 0.5, 0.3], [0.5, 2.0, 0.4], [0.3, 0.4, 1.5]])
    return JointGaussianDependence(["a", "b", "c"], [1.0, -1.0, 0.5], cov)


def test_closed_form_conditioning(reference):
    cond = reference.conditional(0, 2.0)
    cov = reference.covariance
    gain = cov[1:, 0] / cov[0, 0]
    np.testing.assert_allclose(cond.mean, reference.mean[1:] + gain * (2.0 - 1.0))
    np.testing.assert_allclose(cond.covariance, cov[1:, 1:] - np.outer(cov[1:, 0], cov[1:, 0]) / cov[0, 0])
    assert cond.others == (1, 2)


def test_projections_are_exact(reference):
    cond = reference.conditional(1, 0.3)
    one = conditional_1d(reference, 1, 2, 0.3)
    assert one.mean == cond.mean[1] and one.variance == cond.covariance[1, 1]
    mean2, cov2 = conditional_2d(reference, 1, 0, 2, 0.3)
    np.testing.assert_array_equal(mean2, cond.mean)
    np.testing.assert_array_equal(cov2, cond.covariance)
    assert cov2[0, 0] == reference.conditional_1d(1, 0, 0.3).variance
    assert cov2[1, 1] == reference.conditional_1d(1, 2, 0.3).variance


def test_index_collisions_are_rejected(reference):
    with pytest.raises(ConfigurationError):
        reference.conditional_1d(0, 0, 1.0)
    with pytest.raises(ConfigurationError):
        reference.conditional_2d(0, 1, 1, 1.0)
    with pytest.raises(ConfigurationError):
        reference.conditional_2d(0, 0, 2, 1.0)
    with pytest.raises(ConfigurationError):
        reference.conditional(5, 1.0)


def test_untrained_model_refuses_queries():
    dep = DependenceModel.initialize(["a", "b"], [0.0, 0.0], [1.0, 1.0], DependenceConfig(hidden_width=4),
                                     np.random.default_rng(0))
    assert not dep.trained
    with pytest.raises(ConfigurationError, match="not been trained"):
        dep.conditional(0, 0.5)


def test_covariance_is_psd_with_floored_diagonal_on_a_dense_grid():
    config = DependenceConfig(hidden_width=8)
    dep = DependenceModel.initialize(["a", "b", "c", "d"], [0, 0, 0, 0], [1, 1, 1, 1], config,
                                     np.random.default_rng(1))
    dep.trained = True
    grid = np.linspace(0, 1, 1000)
    for i in range(4):
        means, covs = dep.conditional_batch(i, grid)
        assert means.shape == (1000, 3) and covs.shape == (1000, 3, 3)
        np.testing.assert_allclose(covs, np.swapaxes(covs, 1, 2))
        assert np.linalg.eigvalsh(covs).min() >= -1e-8
        assert np.diagonal(covs, axis1=1, axis2=2).min() >= config.variance_floor - 1e-15


def test_conditional_nll_gradients_match_finite_differences():
    dep = DependenceModel.initialize(["a", "b", "c"], [0, 0, 0], [1, 1, 1], DependenceConfig(hidden_width=4),
                                     np.random.default_rng(2), priors={"a": {"b": "increasing"}})
    rng = np.random.default_rng(3)
    batch = (rng.uniform(size=20), rng.uniform(size=(20, 2)))
    objective = _ConditionalNLL(dep, 0)
    _, grads = objective.loss_and_grads(batch)
    for analytic, param in zip(grads, objective.parameters()):
        assert_close_gradients(analytic, finite_difference(lambda: objective.loss(batch), param))


def test_pair_prior_makes_the_conditional_mean_monotone():
    dep = DependenceModel.initialize(["age", "weight"], [0, 0], [1, 1], DependenceConfig(hidden_width=16),
                                     np.random.default_rng(4), priors={"age": {"weight": "increasing"}})
    dep.trained = True
    means, _ = dep.conditional_batch(0, np.linspace(0, 1, 500))
    assert np.all(np.diff(means[:, 0]) >= -1e-12)


def test_learned_conditional_mean_matches_gaussian_conditioning(gaussian_pair):
    learned, exact = gaussian_pair
    for c1 in np.linspace(-1.5, 1.5, 13):
        assert abs(learned.conditional_1d(0, 1, c1).mean - exact.conditional_1d(0, 1, c1).mean) < 0.1


def test_independent_covariates_give_near_zero_conditional_correlation():
    rng = np.random.default_rng(5)
    c = rng.normal(size=(3000, 3))
    dep = fit_dependence(_covariate_dataset(c), DependenceConfig(hidden_width=16,
                                                                 train=train_config(max_epochs=40, batch_size=64)))
    for c1 in np.linspace(-1.5, 1.5, 7):
        cov = dep.conditional(0, c1).covariance
        rho = cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1])
        assert abs(rho) < 0.1


def test_learned_dependence_tracks_an_exponential(toy_models):
    _, _, dep = toy_models
    for c1 in np.linspace(-1.0, 2.0, 13):
        got = dep.conditional_1d(0, 1, c1)
        assert abs(got.mean - np.exp(c1)) <= 0.1 * np.exp(c1) + 0.05
    assert dep.conditional_1d(0, 1, 0.0).variance < 0.1


def test_sampling_reproduces_the_conditional_moments(gaussian_pair):
    learned, _ = gaussian_pair
    sampler = GaussianSampler(learned)
    base = sampler.base(np.random.default_rng(0), 100_000)
    draws = sampler.draw(0, 0.5, base)[:, 0]
    target = learned.conditional_1d(0, 1, 0.5)
    assert abs(draws.mean() - target.mean) < 3 * np.sqrt(target.variance / len(draws)) + 1e-12
    # antithetic pairs share z^2, so only half the draws are independent for the variance
    se_var = target.variance * np.sqrt(4.0 / len(draws))
    assert abs(draws.var(ddof=1) - target.variance) < 3 * se_var


def test_fit_needs_enough_complete_rows():
    c = np.random.default_rng(0).normal(size=(4, 3))
    with pytest.raises(InsufficientDataError):
        fit_dependence(_covariate_dataset(c))
    c = np.random.default_rng(0).normal(size=(10, 3))
    c[:6, 1] = np.nan
    with pytest.raises(InsufficientDataError):
        fit_dependence(_covariate_dataset(c))


def test_single_covariate_has_nothing_to_condition():
    c = np.random.default_rng(0).normal(size=(20, 1))
    dep = fit_dependence(_covariate_dataset(c))
    assert dep.nets == [None] and dep.trained
    means, covs = dep.conditional_batch(0, [0.0, 0.1])
    assert means.shape == (2, 0) and covs.shape == (2, 0, 0)


def test_out_of_range_queries_warn(reference, capsys):
    reference.conditional(0, 100.0)
    assert "WARNING" in capsys.readouterr().err


def test_serialized_model_answers_identically():
    dep = DependenceModel.initialize(["a", "b", "c"], [0, 1, 2], [1, 3, 5], DependenceConfig(hidden_width=4),
                                     np.random.default_rng(6))
    dep.trained = True
    restored = DependenceModel.from_dict(dep.to_dict())
    for got, want in zip(restored.conditional_batch(1, [1.5, 2.5]), dep.conditional_batch(1, [1.5, 2.5])):
        np.testing.assert_array_equal(got, want)
