"""Marginal response distributions p(y | c_i, x) = N(mu~, var_E + var_V).

Given a trained atlas and a model of p(c_{-i} | c_i):

    mu~    = beta + f^m_i(c_i, x) + sum_{k != i} E[f^m_k(c_k, x) | c_i]
    var_E  = f^v_i(c_i, x)        + sum_{k != i} E[f^v_k(c_k, x) | c_i]
    var_V  = Var(sum_{k != i} f^m_k(c_k, x) | c_i)
           = sum_k Var(f^m_k | c_i) + sum_{K1 != K2} Cov(f^m_K1, f^m_K2 | c_i)

Expectations are Monte Carlo averages over L co-covariate draws (cost
O(L * N) per grid point) or Gauss-Hermite quadrature. All grid points of
a curve transform one shared base draw, so a curve is smooth in c_i and
independent of evaluation order or thread count.
"""

import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .atlas_model import AtlasModel, gaussian_nll
from .data import Dataset
from .dependence_model import QUANTILE_LEVELS, ConditionalGaussian, others_of
from .errors import ConfigurationError, NumericalError

MONTE_CARLO = "mc"
QUADRATURE = "quadrature"

HERMITE_NODES_1D = 64
HERMITE_NODES_2D = 16


@dataclass
class SamplingConfig:
    samples: int = 2048
    seed: Optional[int] = 0
    method: str = MONTE_CARLO
    grid_points: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.samples < 100:
            raise ConfigurationError(f"sampling.samples must be >= 100, got {self.samples}")
        if self.samples % 2:
            raise ConfigurationError("sampling.samples must be even (antithetic pairs)")
        if self.method not in (MONTE_CARLO, QUADRATURE):
            raise ConfigurationError(f"sampling.method must be '{MONTE_CARLO}' or '{QUADRATURE}'")
        if self.grid_points < 1 or self.workers < 1:
            raise ConfigurationError("sampling.grid_points and sampling.workers must be >= 1")


@dataclass
class MarginalPoint:
    mu: float
    var_e: float
    var_v: float
    se_mu: float = 0.0
    se_var_e: float = 0.0
    se_var_v: float = 0.0
    variance_terms: float = 0.0     # sum_k Var(f^m_k | c_i)
    covariance_terms: float = 0.0   # sum_{K1 != K2} Cov(f^m_K1, f^m_K2 | c_i)

    @property
    def var_total(self) -> float:
        return self.var_e + self.var_v


@dataclass
class MarginalCurve:
    covariate: str
    index: int
    x: Optional[float]
    grid: np.ndarray
    mu: np.ndarray
    var_e: np.ndarray
    var_v: np.ndarray
    se_mu: np.ndarray
    se_var_e: np.ndarray
    se_var_v: np.ndarray
    dependence: bool = True
    method: str = MONTE_CARLO
    samples: int = 2048
    seed: Optional[int] = 0

    @property
    def var_total(self) -> np.ndarray:
        return self.var_e + self.var_v

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "c_i": self.grid,
            "mu": self.mu,
            "var_E": self.var_e,
            "var_V": self.var_v,
            "var_total": self.var_total,
        })

    def metadata(self) -> dict:
        return {
            "covariate": self.covariate,
            "index": self.index,
            "x": self.x,
            "dependence": self.dependence,
            "method": self.method,
            "samples": self.samples,
            "seed": self.seed,
            "grid_points": int(len(self.grid)),
        }


# ---------------------------------------------------------------------------
# Co-covariate samplers
# ---------------------------------------------------------------------------

def _antithetic_pairs(values: np.ndarray) -> np.ndarray:
    half = len(values) // 2
    return 0.5 * (values[:half] + values[half:])


def _pair_se(values: np.ndarray) -> float:
    pairs = _antithetic_pairs(values)
    if len(pairs) < 2:
        return 0.0
    return float(np.std(pairs, ddof=1) / math.sqrt(len(pairs)))


class GaussianSampler:
    """Draws c_{-i} from a conditional Gaussian dependence model."""

    dependence = True

    def __init__(self, model):
        if not getattr(model, "trained", True):
            raise ConfigurationError("The dependence model has not been trained")
        self.model = model
        self.n_covariates = model.n_covariates

    def base(self, rng: np.random.Generator, samples: int) -> np.ndarray:
        z = rng.standard_normal((samples // 2, self.n_covariates - 1))
        return np.concatenate([z, -z])

    def gaussian(self, i: int, c_i: float) -> Tuple[np.ndarray, np.ndarray]:
        means, covs = self.model.conditional_batch(i, [c_i])
        return means[0], covs[0]

    def conditional(self, i: int, c_i: float) -> ConditionalGaussian:
        return self.model.conditional(i, c_i)

    def draw(self, i: int, c_i: float, base: np.ndarray) -> np.ndarray:
        mean, cov = self.gaussian(i, c_i)
        return mean[None, :] + base @ np.linalg.cholesky(cov).T


class IndependentSampler:
    """Draws every other covariate from its unconditional marginal (dependence ignored)."""

    dependence = False

    def __init__(self, quantiles: np.ndarray):
        self.quantiles = np.asarray(quantiles, dtype=float)
        self.n_covariates = self.quantiles.shape[0]

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "IndependentSampler":
        c, _, _ = dataset.arrays()
        return cls(np.stack([np.nanpercentile(c[:, k], QUANTILE_LEVELS * 100) for k in range(c.shape[1])]))

    def base(self, rng: np.random.Generator, samples: int) -> np.ndarray:
        u = rng.uniform(size=(samples // 2, self.n_covariates - 1))
        return np.concatenate([u, 1.0 - u])

    def draw(self, i: int, c_i: float, base: np.ndarray) -> np.ndarray:
        others = others_of(i, self.n_covariates)
        return np.column_stack([np.interp(base[:, j], QUANTILE_LEVELS, self.quantiles[k])
                                for j, k in enumerate(others)])


class _NoOtherCovariates:
    dependence = True
    n_covariates = 1


def make_sampler(dep, dependence: bool = True):
    if isinstance(dep, (GaussianSampler, IndependentSampler, _NoOtherCovariates)):
        return dep
    if dep is None:
        raise ConfigurationError("A dependence model (or an independent sampler) is required to marginalize")
    if dependence:
        return GaussianSampler(dep)
    return IndependentSampler(dep.quantiles)


# ---------------------------------------------------------------------------
# Point estimates
# ---------------------------------------------------------------------------

def _clamp_var_v(value: float, se: float, scale: float, where: str) -> float:
    if value >= 0:
        return value
    tolerance = 3.0 * se + 1e-9 * max(scale, 1.0)
    if -value <= tolerance:
        print(f"WARNING - Clamped negative variance-of-expectation {value:.3e} to 0 at {where}", file=sys.stderr)
        return 0.0
    raise NumericalError(
        f"Variance-of-expectation {value:.3e} at {where} is below -3 standard errors; "
        "the dependence model does not fit the atlas inputs"
    )


def sampler_for(atlas, dep, dependence: bool = True):
    """The co-covariate sampler for ``atlas``; one-covariate atlases need no dependence model."""
    if not isinstance(atlas, AtlasModel):
        raise ConfigurationError("Marginalization needs an additive atlas; the MLP baseline has no subnetworks")
    sampler = _NoOtherCovariates() if dep is None and atlas.n_covariates == 1 else make_sampler(dep, dependence)
    if sampler.n_covariates != atlas.n_covariates:
        raise ConfigurationError(
            f"Dependence model covers {sampler.n_covariates} covariates, atlas has {atlas.n_covariates}"
        )
    return sampler


def _monte_carlo_point(atlas: AtlasModel, sampler, i: int, c_i: float, x, base: np.ndarray) -> MarginalPoint:
    m_i, v_i = atlas.contributions(i, [c_i], x)
    head_mu = atlas.intercept_value + float(m_i[0])
    if atlas.n_covariates == 1:
        return MarginalPoint(head_mu, float(v_i[0]), 0.0)

    draws = sampler.draw(i, c_i, base)
    others = others_of(i, atlas.n_covariates)
    means = np.empty((len(others), len(base)))
    variances = np.empty_like(means)
    for j, k in enumerate(others):
        means[j], variances[j] = atlas.contributions(k, draws[:, j], x)

    mean_sum = means.sum(axis=0)
    var_sum = variances.sum(axis=0)
    # Var of the sum over joint draws equals the per-covariate variances plus the
    # pairwise covariances; np.cov splits it into those two parts.
    cov = np.atleast_2d(np.cov(means))
    var_v = float(np.var(mean_sum, ddof=1))
    diag = float(np.trace(cov))
    centered_sq = (mean_sum - mean_sum.mean()) ** 2
    return MarginalPoint(
        mu=head_mu + float(mean_sum.mean()),
        var_e=float(v_i[0]) + float(var_sum.mean()),
        var_v=var_v,
        se_mu=_pair_se(mean_sum),
        se_var_e=_pair_se(var_sum),
        se_var_v=_pair_se(centered_sq),
        variance_terms=diag,
        covariance_terms=var_v - diag,
    )


def _quadrature_point(atlas: AtlasModel, sampler: GaussianSampler, i: int, c_i: float, x) -> MarginalPoint:
    m_i, v_i = atlas.contributions(i, [c_i], x)
    mu = atlas.intercept_value + float(m_i[0])
    var_e = float(v_i[0])
    if atlas.n_covariates == 1:
        return MarginalPoint(mu, var_e, 0.0)

    conditional = sampler.conditional(i, c_i)
    others = others_of(i, atlas.n_covariates)
    nodes, weights = np.polynomial.hermite.hermgauss(HERMITE_NODES_1D)
    weights = weights / math.sqrt(math.pi)
    variance_terms = 0.0
    for k in others:
        one = conditional.marginal(k)
        points = one.mean + math.sqrt(2.0 * one.variance) * nodes
        m_k, v_k = atlas.contributions(k, points, x)
        e_m = float(weights @ m_k)
        mu += e_m
        var_e += float(weights @ v_k)
        variance_terms += float(weights @ m_k ** 2) - e_m ** 2

    nodes2, weights2 = np.polynomial.hermite.hermgauss(HERMITE_NODES_2D)
    grid_a, grid_b = np.meshgrid(nodes2, nodes2, indexing="ij")
    std_points = math.sqrt(2.0) * np.column_stack([grid_a.ravel(), grid_b.ravel()])
    w2 = np.outer(weights2, weights2).ravel() / math.pi
    covariance_terms = 0.0
    for a in range(len(others)):
        for b in range(a + 1, len(others)):
            pair_mean, block = conditional.block(others[a], others[b])
            points = pair_mean[None, :] + std_points @ np.linalg.cholesky(block).T
            m_a, _ = atlas.contributions(others[a], points[:, 0], x)
            m_b, _ = atlas.contributions(others[b], points[:, 1], x)
            covariance_terms += 2.0 * (float(w2 @ (m_a * m_b)) - float(w2 @ m_a) * float(w2 @ m_b))

    return MarginalPoint(mu, var_e, variance_terms + covariance_terms,
                         variance_terms=variance_terms, covariance_terms=covariance_terms)


def _warn_outside_range(atlas: AtlasModel, i: int, values):
    lo, hi = atlas.scaler.c_min[i], atlas.scaler.c_max[i]
    values = np.atleast_1d(np.asarray(values, dtype=float))
    outside = int(np.sum((values < lo) | (values > hi)))
    if outside:
        print(f"WARNING - {outside} {atlas.covariate_names[i]} value(s) outside the atlas training range "
              f"[{lo:g}, {hi:g}]", file=sys.stderr)


def marginal_point(atlas: AtlasModel, dep, i, c_i: float, x=None, sampling: Optional[SamplingConfig] = None,
                   dependence: bool = True, base: Optional[np.ndarray] = None) -> MarginalPoint:
    """mu~, var_E and var_V at one value of covariate ``i``."""
    sampler = sampler_for(atlas, dep, dependence)
    i = atlas.covariate_index(i)
    _warn_outside_range(atlas, i, c_i)
    return _evaluate_point(atlas, sampler, i, c_i, x, sampling or SamplingConfig(), base)


def _evaluate_point(atlas: AtlasModel, sampler, i: int, c_i: float, x, sampling: SamplingConfig,
                    base: Optional[np.ndarray]) -> MarginalPoint:
    if sampling.method == QUADRATURE:
        if isinstance(sampler, IndependentSampler):
            raise ConfigurationError("Quadrature needs the Gaussian dependence model; use mc with dependence off")
        point = _quadrature_point(atlas, sampler, i, float(c_i), x)
    else:
        if base is None and atlas.n_covariates > 1:
            base = sampler.base(np.random.default_rng(sampling.seed), sampling.samples)
        point = _monte_carlo_point(atlas, sampler, i, float(c_i), x, base)
    scale = point.var_e + abs(point.var_v)
    point.var_v = _clamp_var_v(point.var_v, point.se_var_v, scale, f"{atlas.covariate_names[i]}={c_i:g}")
    return point


def marginal_mean(atlas, dep, i, c_i: float, x=None, sampling: Optional[SamplingConfig] = None) -> float:
    return marginal_point(atlas, dep, i, c_i, x, sampling).mu


def expected_variance(atlas, dep, i, c_i: float, x=None, sampling: Optional[SamplingConfig] = None) -> float:
    return marginal_point(atlas, dep, i, c_i, x, sampling).var_e


def variance_of_expectation(atlas, dep, i, c_i: float, x=None, sampling: Optional[SamplingConfig] = None) -> float:
    return marginal_point(atlas, dep, i, c_i, x, sampling).var_v


def default_grid(atlas: AtlasModel, i: int, points: int) -> np.ndarray:
    return np.linspace(atlas.scaler.c_min[i], atlas.scaler.c_max[i], points)


def marginal_curve(atlas: AtlasModel, dep, i, x=None, grid=None, sampling: Optional[SamplingConfig] = None,
                   dependence: bool = True) -> MarginalCurve:
    """Evaluate the marginal distribution of y over a grid of c_i values."""
    sampling = sampling or SamplingConfig()
    sampler = sampler_for(atlas, dep, dependence)
    i = atlas.covariate_index(i)
    grid = default_grid(atlas, i, sampling.grid_points) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ConfigurationError("The marginalization grid must be a non-empty 1D array")
    _warn_outside_range(atlas, i, grid)

    base = None
    if sampling.method == MONTE_CARLO and atlas.n_covariates > 1:
        base = sampler.base(np.random.default_rng(sampling.seed), sampling.samples)

    def evaluate(c):
        return _evaluate_point(atlas, sampler, i, c, x, sampling, base)

    if sampling.workers > 1:
        with ThreadPoolExecutor(max_workers=sampling.workers) as pool:
            points = list(pool.map(evaluate, grid))
    else:
        points = [evaluate(c) for c in grid]

    def column(name):
        return np.array([getattr(p, name) for p in points])

    return MarginalCurve(
        covariate=atlas.covariate_names[i], index=i, x=None if x is None else float(x), grid=grid,
        mu=column("mu"), var_e=column("var_e"), var_v=column("var_v"),
        se_mu=column("se_mu"), se_var_e=column("se_var_e"), se_var_v=column("se_var_v"),
        dependence=sampler.dependence, method=sampling.method, samples=sampling.samples, seed=sampling.seed,
    )


def brute_force_marginal(atlas: AtlasModel, dep, i, c_i: float, x=None, samples: int = 100_000,
                         seed: Optional[int] = 0, chunk: int = 20_000) -> Tuple[float, float]:
    """Empirical mean and variance of y drawn through the full joint p(c_{-i} | c_i) and the atlas."""
    i = atlas.covariate_index(i)
    if samples < 2:
        raise ConfigurationError(f"brute_force_marginal needs at least 2 samples, got {samples}")
    if atlas.n_covariates > 4:
        raise ConfigurationError("brute_force_marginal is an oracle for small models (N <= 4)")
    sampler = make_sampler(dep, True) if atlas.n_covariates > 1 else None
    rng = np.random.default_rng(seed)
    others = list(others_of(i, atlas.n_covariates))
    total = total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        c = np.empty((m, atlas.n_covariates))
        c[:, i] = c_i
        if others:
            mean, cov = sampler.gaussian(i, c_i)
            z = rng.standard_normal((m, len(others)))
            c[:, others] = mean[None, :] + z @ np.linalg.cholesky(cov).T
        means, variances = atlas.predict_batch(c, x)
        y = means + np.sqrt(variances) * rng.standard_normal(m)
        total += float(y.sum())
        total_sq += float((y ** 2).sum())
        done += m
    mean = total / samples
    return mean, (total_sq - samples * mean ** 2) / (samples - 1)


def marginal_nll(atlas: AtlasModel, dep, i, dataset: Dataset, sampling: Optional[SamplingConfig] = None,
                 dependence: bool = True) -> float:
    """Mean NLL of the responses in ``dataset`` under p(y | c_i, x)."""
    sampling = sampling or SamplingConfig()
    sampler = sampler_for(atlas, dep, dependence)
    i = atlas.covariate_index(i)
    c, x, y = dataset.arrays()
    keys = np.column_stack([c[:, i], np.zeros(len(y)) if x is None else x])
    _warn_outside_range(atlas, i, c[:, i])
    base = None
    if sampling.method == MONTE_CARLO and atlas.n_covariates > 1:
        base = sampler.base(np.random.default_rng(sampling.seed), sampling.samples)
    cache: Dict[Tuple[float, float], Tuple[float, float]] = {}
    mus = np.empty(len(y))
    totals = np.empty(len(y))
    for row, (c_i, x_val) in enumerate(keys):
        key = (float(c_i), float(x_val))
        if key not in cache:
            point = _evaluate_point(atlas, sampler, i, key[0], None if x is None else key[1], sampling, base)
            cache[key] = (point.mu, point.var_total)
        mus[row], totals[row] = cache[key]
    return float(np.mean(gaussian_nll(mus, totals, y)))


def write_curve(curve: MarginalCurve, path, extra: Optional[dict] = None) -> Path:
    """Write the curve CSV and a JSON sidecar (same stem, .json)."""
    path = Path(path)
    curve.to_frame().to_csv(path, index=False, float_format="%.17g")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({**curve.metadata(), **(extra or {})}, indent=2, sort_keys=True) + "\n")
    return sidecar
