"""Missing-covariate imputation and percentile-stationary individualized prediction."""

import math
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import erf

from .atlas_model import GaussianParams
from .data import LOCATION, RESPONSE, SUBJECT, TIME, Dataset
from .errors import ConfigurationError, DomainError, ImputationError
from .metrics import landmark_depths, marpd


@dataclass
class ImputationResult:
    values: np.ndarray
    sources: List[Optional[int]]      # None where the entry was observed
    variances: List[Optional[float]]

    @property
    def imputed(self) -> List[int]:
        return [k for k, s in enumerate(self.sources) if s is not None]


def impute(dep, covariates) -> ImputationResult:
    """Fill each missing c_i from the observed covariate whose conditional variance is smallest.

    Only originally observed covariates are sources; ties go to the lowest index.
    """
    values = np.asarray(covariates, dtype=float).copy()
    if values.ndim != 1 or len(values) != dep.n_covariates:
        raise ConfigurationError(f"Expected {dep.n_covariates} covariates, got shape {values.shape}")
    observed = [k for k in range(len(values)) if not np.isnan(values[k])]
    sources: List[Optional[int]] = [None] * len(values)
    variances: List[Optional[float]] = [None] * len(values)
    if len(observed) == len(values):
        return ImputationResult(values, sources, variances)
    if not observed:
        raise ImputationError("All covariates are missing; nothing to impute from")

    filled = values.copy()
    for i in range(len(values)):
        if i in observed:
            continue
        candidates = [dep.conditional_1d(k, i, values[k]) for k in observed]
        best = int(np.argmin([p.variance for p in candidates]))
        filled[i] = candidates[best].mean
        sources[i] = observed[best]
        variances[i] = candidates[best].variance
    return ImputationResult(filled, sources, variances)


def impute_dataset(dep, dataset: Dataset) -> Dataset:
    """Impute every incomplete record; each distinct covariate row is imputed once."""
    c, _, _ = dataset.arrays()
    missing = np.isnan(c).any(axis=1)
    if not missing.any():
        return dataset
    filled = c.copy()
    cache: Dict[tuple, np.ndarray] = {}
    for row in np.flatnonzero(missing):
        key = tuple(np.where(np.isnan(c[row]), np.inf, c[row]))
        if key not in cache:
            cache[key] = impute(dep, c[row]).values
        filled[row] = cache[key]
    print(f"INFO - Imputed {int(missing.sum())} records ({len(cache)} distinct covariate rows)", file=sys.stderr)
    return dataset.with_covariates(filled)


@dataclass(frozen=True)
class SubjectObservation:
    covariates: tuple
    y: float
    x: Optional[float] = None
    time: int = 0

    def __post_init__(self):
        if not math.isfinite(self.y):
            raise DomainError(f"Observed response must be finite, got {self.y}")
        if any(math.isnan(v) for v in self.covariates):
            raise ConfigurationError("Observation covariates must be complete")
        if self.x is not None and not 0.0 <= self.x <= 1.0:
            raise ConfigurationError(f"Location x must lie in [0, 1], got {self.x}")


def gaussian_cdf(y: float, params: GaussianParams) -> float:
    if params.variance <= 0:
        raise DomainError(f"Variance must be > 0, got {params.variance}")
    return float(0.5 * (1.0 + erf((y - params.mean) / math.sqrt(2.0 * params.variance))))


def _warn_if_far(atlas, c_t: np.ndarray, c_next: np.ndarray):
    for i, name in enumerate(atlas.covariate_names):
        iqr = atlas.scaler.iqr(i)
        if abs(c_next[i] - c_t[i]) > iqr:
            print(f"WARNING - {name} changes by {abs(c_next[i] - c_t[i]):g}, more than the training "
                  f"interquartile range {iqr:g}; the stationary-percentile assumption may not hold", file=sys.stderr)


def _individualized(y, m0, v0, m1, v1):
    if np.any(np.asarray(v0) <= 0) or np.any(np.asarray(v1) <= 0):
        raise DomainError("Predicted variances must be > 0 for individualized prediction")
    return m1 + np.sqrt(v1 / v0) * (y - m0)


def individualized_predict(atlas, obs: SubjectObservation, c_next, x=None) -> float:
    """Predict y at c_next keeping the subject's percentile from ``obs``."""
    x = obs.x if x is None else x
    c_t = np.asarray(obs.covariates, dtype=float)
    c_next = np.asarray(c_next, dtype=float)
    if c_t.shape != c_next.shape:
        raise ConfigurationError(f"Covariate vectors differ in length: {len(c_t)} vs {len(c_next)}")
    if np.array_equal(c_t, c_next):
        return float(obs.y)
    _warn_if_far(atlas, c_t, c_next)
    p0 = atlas.predict(c_t, x)
    p1 = atlas.predict(c_next, x)
    return float(_individualized(obs.y, p0.mean, p0.variance, p1.mean, p1.variance))


CARRY = "carry"
POPULATION = "population"
INDIVIDUALIZED = "individualized"
PREDICTION_MODES = (CARRY, POPULATION, INDIVIDUALIZED)


@dataclass
class IndividualizedReport:
    n_pairs: int
    overall: Dict[str, float]
    per_landmark: Dict[str, Dict[str, float]] = field(default_factory=dict)


def visit_pairs(dataset: Dataset) -> pd.DataFrame:
    """Consecutive visits of every longitudinal subject, matched by location."""
    frame = dataset.frame
    keys = [SUBJECT, LOCATION] if dataset.spatial else [SUBJECT]
    cols = keys + [TIME, RESPONSE] + dataset.covariate_names
    frame = frame[cols].sort_values(keys + [TIME])
    nxt = frame.groupby(keys, sort=False).shift(-1)
    pairs = frame.join(nxt, rsuffix="_next")
    pairs = pairs[pairs[TIME + "_next"].notna()]
    return pairs.reset_index(drop=True)


def evaluate_individualized(atlas, dataset: Dataset, landmarks: Optional[Dict[str, float]] = None
                            ) -> IndividualizedReport:
    """MARPD of carry-forward, population and individualized predictions of each follow-up visit."""
    pairs = visit_pairs(dataset)
    if pairs.empty:
        raise ConfigurationError("No subject has more than one visit; nothing to evaluate")
    names = dataset.covariate_names
    c_t = pairs[names].to_numpy(dtype=float)
    c_next = pairs[[n + "_next" for n in names]].to_numpy(dtype=float)
    x = pairs[LOCATION].to_numpy(dtype=float) if dataset.spatial else None
    y_t = pairs[RESPONSE].to_numpy(dtype=float)
    truth = pairs[RESPONSE + "_next"].to_numpy(dtype=float)

    m0, v0 = atlas.predict_batch(c_t, x)
    m1, v1 = atlas.predict_batch(c_next, x)
    same = np.all(c_t == c_next, axis=1)
    predictions = {
        CARRY: y_t,
        POPULATION: m1,
        INDIVIDUALIZED: np.where(same, y_t, _individualized(y_t, m0, v0, m1, v1)),
    }
    overall = {mode: marpd(pred, truth) for mode, pred in predictions.items()}
    per_landmark = {}
    if x is not None and landmarks:
        for name, depth in landmark_depths(np.unique(x), landmarks).items():
            mask = x == depth
            per_landmark[name] = {mode: marpd(pred[mask], truth[mask]) for mode, pred in predictions.items()}
    return IndividualizedReport(len(pairs), overall, per_landmark)
