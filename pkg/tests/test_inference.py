import math

import numpy as np
import pandas as pd
import pytest

from conftest import train_config
from src.atlas_model import AtlasConfig, GaussianParams, fit_atlas
from src.data import DEFAULT_LANDMARKS, RESPONSE, SUBJECT, TIME, Dataset, gen_spatial_population
from src.dependence_model import DependenceConfig, JointGaussianDependence, fit_dependence
from src.errors import ConfigurationError, DomainError, ImputationError
from src.inference import (CARRY, INDIVIDUALIZED, POPULATION, SubjectObservation, evaluate_individualized,
                           gaussian_cdf, impute, impute_dataset, individualized_predict, visit_pairs)


@pytest.fixture
def reference():
    cov = np.array([[1.0, 0.5, 0.3], [0.5, 2.0, 0.4], [0.3, 0.4, 1.5]])
    return JointGaussianDependence(["a", "b", "c"], [1.0, -1.0, 0.5], cov)


def _constant_variance(atlas, bias=0.3):
    for sub in atlas.subnetworks:
        for w in sub.variance_net.weights:
            w[...] = 0.0
        sub.variance_net.biases[-1][...] = bias
    return atlas


def test_imputation_uses_the_least_uncertain_observed_source(reference):
    result = impute(reference, [2.0, math.nan, 0.0])
    # Var(b | a) = 2 - 0.25 = 1.75 < Var(b | c) = 2 - 0.16 / 1.5
    assert result.sources == [None, 0, None]
    assert result.values[1] == pytest.approx(-1.0 + 0.5 * (2.0 - 1.0))
    assert result.variances[1] == pytest.approx(1.75)
    assert result.imputed == [1]
    assert result.values[0] == 2.0 and result.values[2] == 0.0


def test_only_originally_observed_covariates_are_sources(reference):
    result = impute(reference, [math.nan, math.nan, 0.5])
    assert result.sources == [2, 2, None]
    assert result.values[0] == pytest.approx(reference.conditional_1d(2, 0, 0.5).mean)


def test_complete_records_pass_through(reference):
    values = [0.1, 0.2, 0.3]
    result = impute(reference, values)
    np.testing.assert_array_equal(result.values, values)
    assert result.imputed == []


def test_imputation_needs_at_least_one_observed_covariate(reference):
    with pytest.raises(ImputationError):
        impute(reference, [math.nan] * 3)
    with pytest.raises(ConfigurationError):
        impute(reference, [0.0, 1.0])


@pytest.mark.parametrize("third", [
    lambda c1, rng: rng.normal(0.0, 1.0, len(c1)),
    lambda c1, rng: c1 + rng.normal(0.0, 1.0, len(c1)),
], ids=["independent", "noisy-copy"])
def test_learned_dependence_imputes_from_the_informative_covariate(third):
    rng = np.random.default_rng(0)
    n = 2000
    c1 = rng.uniform(0.0, 2.0, n)
    c2 = np.exp(c1) + rng.normal(0.0, 0.05, n)
    c3 = third(c1, rng)
    frame = pd.DataFrame({SUBJECT: [f"s{k}" for k in range(n)], TIME: 0, RESPONSE: 0.0,
                          "c1": c1, "c2": c2, "c3": c3})
    train, test = Dataset(frame.iloc[:1800], ["c1", "c2", "c3"]), frame.iloc[1800:]
    dep = fit_dependence(train, DependenceConfig(hidden_width=16,
                                                 train=train_config(max_epochs=80, batch_size=64)))

    sources, errors = [], []
    for _, row in test.iterrows():
        result = impute(dep, [row["c1"], math.nan, row["c3"]])
        sources.append(result.sources[1])
        errors.append(abs(result.values[1] - row["c2"]) / row["c2"])
    assert np.mean(np.array(sources) == 0) >= 0.99
    assert np.median(errors) <= 0.10


def test_impute_dataset_fills_only_missing_entries(reference):
    frame = pd.DataFrame({SUBJECT: ["s1", "s2", "s3"], TIME: 0, RESPONSE: 1.0,
                          "a": [0.0, 1.0, 2.0], "b": [1.0, np.nan, np.nan], "c": [0.5, 0.5, np.nan]})
    dataset = Dataset(frame, ["a", "b", "c"])
    filled = impute_dataset(reference, dataset)
    c, _, _ = filled.arrays()
    assert not np.isnan(c).any()
    np.testing.assert_array_equal(c[0], [0.0, 1.0, 0.5])
    assert c[1, 1] == impute(reference, [1.0, math.nan, 0.5]).values[1]
    complete = dataset.complete()
    assert impute_dataset(reference, complete) is complete


def test_gaussian_cdf_values():
    assert gaussian_cdf(0.0, GaussianParams(0.0, 1.0)) == pytest.approx(0.5, abs=1e-12)
    assert gaussian_cdf(2.0, GaussianParams(0.0, 1.0)) == pytest.approx(0.9772498680518208, abs=1e-7)
    ys = np.linspace(-5, 5, 101)
    values = [gaussian_cdf(y, GaussianParams(0.3, 2.0)) for y in ys]
    assert np.all(np.diff(values) >= 0)


def test_unchanged_covariates_return_the_observation(random_atlas):
    atlas = random_atlas(n_covariates=2, spatial=True)
    obs = SubjectObservation((0.3, 0.6), 12.345678901234, x=0.5)
    assert individualized_predict(atlas, obs, [0.3, 0.6]) == 12.345678901234


def test_homoscedastic_atlas_shifts_by_the_mean_difference(random_atlas):
    atlas = _constant_variance(random_atlas(n_covariates=2))
    obs = SubjectObservation((0.2, 0.4), 3.0)
    p0, p1 = atlas.predict([0.2, 0.4]), atlas.predict([0.35, 0.5])
    got = individualized_predict(atlas, obs, [0.35, 0.5])
    assert got == pytest.approx(3.0 + p1.mean - p0.mean, abs=1e-12)


def test_percentile_is_preserved_and_the_map_inverts(random_atlas):
    atlas = random_atlas(n_covariates=3, spatial=True, seed=5)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c_t, c_next = rng.uniform(0.3, 0.7, 3), rng.uniform(0.3, 0.7, 3)
        x = rng.uniform()
        y = rng.normal(0.0, 2.0)
        forward = individualized_predict(atlas, SubjectObservation(tuple(c_t), y, x), c_next)
        back = individualized_predict(atlas, SubjectObservation(tuple(c_next), forward, x), c_t)
        assert back == pytest.approx(y, abs=1e-9)
        assert gaussian_cdf(forward, atlas.predict(c_next, x)) == pytest.approx(
            gaussian_cdf(y, atlas.predict(c_t, x)), abs=1e-9)


def test_large_covariate_changes_warn(random_atlas, capsys):
    atlas = random_atlas(n_covariates=2)
    individualized_predict(atlas, SubjectObservation((0.1, 0.5), 1.0), [0.9, 0.5])
    assert "interquartile range" in capsys.readouterr().err
    individualized_predict(atlas, SubjectObservation((0.1, 0.5), 1.0), [0.2, 0.5])
    assert "WARNING" not in capsys.readouterr().err


def test_observation_validation():
    with pytest.raises(DomainError):
        SubjectObservation((0.1,), math.inf)
    with pytest.raises(ConfigurationError):
        SubjectObservation((math.nan,), 1.0)
    with pytest.raises(ConfigurationError):
        SubjectObservation((0.1,), 1.0, x=2.0)


def test_visit_pairs_match_consecutive_visits():
    frame = pd.DataFrame({SUBJECT: ["a", "a", "a", "b"], TIME: [2, 0, 1, 0], RESPONSE: [3.0, 1.0, 2.0, 9.0],
                          "c1": [0.3, 0.1, 0.2, 0.5]})
    pairs = visit_pairs(Dataset(frame, ["c1"]))
    assert pairs[TIME].tolist() == [0, 1]
    assert pairs[TIME + "_next"].tolist() == [1, 2]
    assert pairs[RESPONSE + "_next"].tolist() == [2.0, 3.0]
    assert pairs["c1_next"].tolist() == [0.2, 0.3]


def test_individualized_evaluation_on_a_longitudinal_population():
    dataset = gen_spatial_population(60, seed=0, n_depths=12, longitudinal_fraction=0.5)
    atlas = fit_atlas(dataset, AtlasConfig(hidden_width=8, train=train_config(max_epochs=5)))
    report = evaluate_individualized(atlas, dataset, DEFAULT_LANDMARKS)
    assert report.n_pairs == int((dataset.frame[TIME] == 1).sum())
    assert set(report.overall) == {CARRY, POPULATION, INDIVIDUALIZED}
    assert set(report.per_landmark) == set(DEFAULT_LANDMARKS)
    assert all(value >= 0 for value in report.overall.values())


def test_individualized_evaluation_needs_follow_up_visits():
    dataset = gen_spatial_population(50, seed=1, n_depths=5)
    atlas = fit_atlas(dataset, AtlasConfig(hidden_width=4, train=train_config(max_epochs=2)))
    with pytest.raises(ConfigurationError):
        evaluate_individualized(atlas, dataset)
