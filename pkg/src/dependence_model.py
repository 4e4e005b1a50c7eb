"""Conditional covariate distributions p(c_{-i} | c_i).

For every covariate i a network g_i maps the (min-max normalized) value
c_i to the mean and a Cholesky factor of a Gaussian over the remaining
N-1 covariates:

    Sigma(c_i) = L(c_i) L(c_i)^T + floor * I

with a softplus-positive diagonal. Networks use a Lipschitz GroupSort
backbone; declared pair priors ("weight increases with age") make the
corresponding mean outputs monotone.

JointGaussianDependence answers the same queries in closed form for a
known joint Gaussian and serves as a reference model.
"""

import math
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .atlas_model import DECREASING, INCREASING, GaussianParams
from .data import SUBJECT, TIME, Dataset
from .errors import ConfigurationError, InsufficientDataError
from .monotone_net import MonotoneNetwork
from .nn_core import LINEAR, SOFTPLUS, TrainConfig, train_loop

QUANTILE_LEVELS = np.linspace(0.0, 1.0, 101)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DependenceConfig:
    enabled: bool = True
    hidden_width: int = 128
    lipschitz: float = 8.0
    group_size: int = 2
    variance_floor: float = 1e-4
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.hidden_width % self.group_size:
            raise ConfigurationError("dependence.hidden_width must be divisible by dependence.group_size")
        if not self.lipschitz > 0 or not self.variance_floor > 0:
            raise ConfigurationError("dependence.lipschitz and dependence.variance_floor must be > 0")


@dataclass(frozen=True)
class ConditionalGaussian:
    """Gaussian over the covariates ``others`` given covariate ``index`` = ``value`` (original units)."""
    index: int
    value: float
    others: Tuple[int, ...]
    mean: np.ndarray
    covariance: np.ndarray

    def position(self, k: int) -> int:
        if k == self.index:
            raise ConfigurationError(f"Covariate {k} is the conditioning covariate")
        if k not in self.others:
            raise ConfigurationError(f"Covariate index {k} out of range")
        return self.others.index(k)

    def marginal(self, k: int) -> GaussianParams:
        p = self.position(k)
        return GaussianParams(float(self.mean[p]), float(self.covariance[p, p]))

    def block(self, k1: int, k2: int) -> Tuple[np.ndarray, np.ndarray]:
        if k1 == k2:
            raise ConfigurationError(f"Pair indices must differ, got ({k1}, {k2})")
        idx = [self.position(k1), self.position(k2)]
        return self.mean[idx].copy(), self.covariance[np.ix_(idx, idx)].copy()


def others_of(i: int, n: int) -> Tuple[int, ...]:
    return tuple(k for k in range(n) if k != i)


class _ConditionalDistribution:
    """Queries shared by the learned and the closed-form dependence models."""

    covariate_names: List[str]
    c_min: List[float]
    c_max: List[float]
    quantiles: np.ndarray
    trained: bool = True

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def _moments(self, i: int, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _check_index(self, i: int) -> int:
        i = int(i)
        if not 0 <= i < self.n_covariates:
            raise ConfigurationError(f"Covariate index {i} out of range 0..{self.n_covariates - 1}")
        return i

    def conditional_batch(self, i: int, values) -> Tuple[np.ndarray, np.ndarray]:
        """Means (n, N-1) and covariances (n, N-1, N-1) in original units for each c_i in ``values``."""
        if not self.trained:
            raise ConfigurationError("The dependence model has not been trained")
        i = self._check_index(i)
        values = np.atleast_1d(np.asarray(values, dtype=float))
        lo, hi = self.c_min[i], self.c_max[i]
        if np.any((values < lo) | (values > hi)):
            print(f"WARNING - {self.covariate_names[i]} query outside the training range [{lo:g}, {hi:g}]",
                  file=sys.stderr)
        if self.n_covariates == 1:
            return np.zeros((len(values), 0)), np.zeros((len(values), 0, 0))
        return self._moments(i, values)

    def conditional(self, i: int, c_i: float) -> ConditionalGaussian:
        means, covs = self.conditional_batch(i, [c_i])
        return ConditionalGaussian(int(i), float(c_i), others_of(int(i), self.n_covariates), means[0], covs[0])

    def conditional_1d(self, i: int, k: int, c_i: float) -> GaussianParams:
        return self.conditional(i, c_i).marginal(k)

    def conditional_2d(self, i: int, k1: int, k2: int, c_i: float) -> Tuple[np.ndarray, np.ndarray]:
        return self.conditional(i, c_i).block(k1, k2)


class DependenceModel(_ConditionalDistribution):

    def __init__(self, covariate_names: List[str], c_min: List[float], c_max: List[float], quantiles: np.ndarray,
                 nets: List[Optional[MonotoneNetwork]], variance_floor: float = 1e-4,
                 priors: Optional[Dict[str, Dict[str, str]]] = None, trained: bool = True):
        self.covariate_names = list(covariate_names)
        self.c_min = [float(v) for v in c_min]
        self.c_max = [float(v) for v in c_max]
        self.quantiles = np.asarray(quantiles, dtype=float)
        self.nets = nets
        self.variance_floor = variance_floor
        self.priors = priors or {}
        self.trained = trained

    @property
    def _spans(self) -> np.ndarray:
        spans = np.asarray(self.c_max) - np.asarray(self.c_min)
        return np.where(spans > 0, spans, 1.0)

    @classmethod
    def initialize(cls, covariate_names: List[str], c_min: Sequence[float], c_max: Sequence[float],
                   config: DependenceConfig, rng: np.random.Generator,
                   priors: Optional[Dict[str, Dict[str, str]]] = None,
                   quantiles: Optional[np.ndarray] = None) -> "DependenceModel":
        """Untrained networks; quantiles default to uniform marginals over [c_min, c_max]."""
        n = len(covariate_names)
        priors = validate_dependence_priors(priors or {}, covariate_names)
        if quantiles is None:
            quantiles = np.stack([lo + (hi - lo) * QUANTILE_LEVELS for lo, hi in zip(c_min, c_max)])
        nets: List[Optional[MonotoneNetwork]] = []
        d = n - 1
        for i, name in enumerate(covariate_names):
            if d == 0:
                nets.append(None)
                continue
            rows, cols = np.tril_indices(d)
            out_acts = [LINEAR] * d + [SOFTPLUS if r == c else LINEAR for r, c in zip(rows, cols)]
            signs = [0] * (d + len(rows))
            for pos, k in enumerate(others_of(i, n)):
                direction = priors.get(name, {}).get(covariate_names[k])
                signs[pos] = {INCREASING: 1, DECREASING: -1}.get(direction, 0)
            width = config.hidden_width
            nets.append(MonotoneNetwork.initialize([1, width, width, d + len(rows)], rng, config.lipschitz,
                                                   [0], signs, out_acts, config.group_size))
        return cls(covariate_names, list(c_min), list(c_max), quantiles, nets, config.variance_floor, priors,
                   trained=False)

    def _cholesky(self, out: np.ndarray) -> np.ndarray:
        d = self.n_covariates - 1
        rows, cols = np.tril_indices(d)
        chol = np.zeros((out.shape[0], d, d))
        chol[:, rows, cols] = out[:, d:]
        return chol

    def normalized_moments(self, i: int, c_norm: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(mean, Cholesky factor, covariance) in normalized units."""
        out = self.nets[i].forward(np.asarray(c_norm, dtype=float)[:, None])
        d = self.n_covariates - 1
        chol = self._cholesky(out)
        cov = chol @ np.swapaxes(chol, 1, 2) + self.variance_floor * np.eye(d)
        return out[:, :d], chol, cov

    def _moments(self, i: int, c: np.ndarray):
        spans = self._spans
        mean_n, _, cov_n = self.normalized_moments(i, (c - self.c_min[i]) / spans[i])
        others = list(others_of(i, self.n_covariates))
        lo = np.asarray(self.c_min)[others]
        scale = spans[others]
        return lo + scale * mean_n, cov_n * np.outer(scale, scale)

    def to_dict(self) -> dict:
        return {
            "covariate_names": self.covariate_names,
            "c_min": self.c_min,
            "c_max": self.c_max,
            "quantiles": self.quantiles.tolist(),
            "variance_floor": self.variance_floor,
            "priors": self.priors,
            "trained": self.trained,
            "networks": {name: (None if net is None else net.to_dict())
                         for name, net in zip(self.covariate_names, self.nets)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DependenceModel":
        names = data["covariate_names"]
        nets = [None if data["networks"][name] is None else MonotoneNetwork.from_dict(data["networks"][name])
                for name in names]
        return cls(names, data["c_min"], data["c_max"], np.asarray(data["quantiles"]), nets,
                   float(data["variance_floor"]), data.get("priors", {}), bool(data.get("trained", True)))


class JointGaussianDependence(_ConditionalDistribution):
    """Exact conditionals of c ~ N(mean, covariance)."""

    def __init__(self, covariate_names: List[str], mean, covariance, c_min=None, c_max=None):
        self.covariate_names = list(covariate_names)
        self.mean = np.asarray(mean, dtype=float)
        self.covariance = np.asarray(covariance, dtype=float)
        n = len(self.covariate_names)
        if self.mean.shape != (n,) or self.covariance.shape != (n, n):
            raise ConfigurationError(f"Joint Gaussian needs a mean of length {n} and a {n}x{n} covariance")
        sd = np.sqrt(np.diag(self.covariance))
        self.c_min = list(self.mean - 4 * sd) if c_min is None else list(c_min)
        self.c_max = list(self.mean + 4 * sd) if c_max is None else list(c_max)
        levels = np.clip(QUANTILE_LEVELS, 5e-4, 1 - 5e-4)
        self.quantiles = self.mean[:, None] + sd[:, None] * stats.norm.ppf(levels)[None, :]

    def _moments(self, i: int, c: np.ndarray):
        others = list(others_of(i, self.n_covariates))
        s_oi = self.covariance[others, i]
        s_ii = self.covariance[i, i]
        gain = s_oi / s_ii
        means = self.mean[others][None, :] + (c - self.mean[i])[:, None] * gain[None, :]
        cov = self.covariance[np.ix_(others, others)] - np.outer(s_oi, s_oi) / s_ii
        return means, np.broadcast_to(cov, (len(c),) + cov.shape).copy()


class _ConditionalNLL:
    """Trainable wrapper: multivariate Gaussian NLL of the other covariates given c_i."""

    def __init__(self, model: DependenceModel, i: int):
        self.model = model
        self.i = i
        self.net = model.nets[i]

    def parameters(self):
        return self.net.parameters()

    def project(self):
        self.net.project()

    def _terms(self, batch, trace: bool):
        c, target = batch
        d = target.shape[1]
        if trace:
            out, tr = self.net.forward_trace(c[:, None])
        else:
            out, tr = self.net.forward(c[:, None]), None
        chol = self.model._cholesky(out)
        cov = chol @ np.swapaxes(chol, 1, 2) + self.model.variance_floor * np.eye(d)
        prec = np.linalg.inv(cov)
        resid = target - out[:, :d]
        alpha = np.einsum("nij,nj->ni", prec, resid)
        _, logdet = np.linalg.slogdet(cov)
        losses = 0.5 * (d * _LOG_2PI + logdet + np.einsum("ni,ni->n", resid, alpha))
        return float(np.mean(losses)), out, tr, chol, prec, alpha

    def loss(self, batch) -> float:
        return self._terms(batch, trace=False)[0]

    def loss_and_grads(self, batch):
        loss, out, trace, chol, prec, alpha = self._terms(batch, trace=True)
        n = out.shape[0]
        d = alpha.shape[1]
        g_cov = 0.5 * (prec - alpha[:, :, None] * alpha[:, None, :]) / n
        g_chol = 2.0 * g_cov @ chol
        rows, cols = np.tril_indices(d)
        upstream = np.concatenate([-alpha / n, g_chol[:, rows, cols]], axis=1)
        grads, _ = self.net.backward(trace, upstream)
        return loss, grads


def validate_dependence_priors(priors: Dict[str, Dict[str, str]], covariate_names: Sequence[str]):
    for cond, targets in priors.items():
        if cond not in covariate_names:
            raise ConfigurationError(f"dependence_priors names unknown covariate {cond!r}")
        for target, direction in (targets or {}).items():
            if target not in covariate_names or target == cond:
                raise ConfigurationError(f"dependence_priors.{cond} names invalid covariate {target!r}")
            if direction not in (INCREASING, DECREASING):
                raise ConfigurationError(f"dependence_priors.{cond}.{target} must be increasing or decreasing")
    return {cond: dict(targets or {}) for cond, targets in priors.items()}


def covariate_table(dataset: Dataset) -> np.ndarray:
    """One covariate row per (subject, visit); spatial records repeat them per depth."""
    frame = dataset.frame.drop_duplicates([SUBJECT, TIME])
    return frame[dataset.covariate_names].to_numpy(dtype=float)


def fit_dependence(dataset: Dataset, config: Optional[DependenceConfig] = None,
                   priors: Optional[Dict[str, Dict[str, str]]] = None) -> DependenceModel:
    """Train one conditional network per covariate on the complete covariate rows."""
    config = config or DependenceConfig()
    names = dataset.covariate_names
    n = len(names)
    table = covariate_table(dataset)
    complete = table[~np.isnan(table).any(axis=1)]
    if len(complete) < n + 2:
        raise InsufficientDataError(
            f"Need at least {n + 2} complete covariate rows to fit the dependence model, got {len(complete)}"
        )
    levels = QUANTILE_LEVELS * 100
    quantiles = np.stack([np.nanpercentile(table[:, k], levels) for k in range(n)])
    seed = 0 if config.train.seed is None else config.train.seed
    model = DependenceModel.initialize(names, complete.min(axis=0), complete.max(axis=0), config,
                                       np.random.default_rng(seed), priors, quantiles)
    if n > 1:
        normalized = (complete - np.asarray(model.c_min)) / model._spans
        batch_size = config.train.batch_size or 32
        for i, name in enumerate(names):
            run_cfg = TrainConfig(**{**config.train.__dict__, "batch_size": batch_size, "seed": seed + i})
            others = list(others_of(i, n))
            train_loop(_ConditionalNLL(model, i), (normalized[:, i], normalized[:, others]), run_cfg,
                       name=f"dependence g_{name}")
    model.trained = True
    print(f"INFO - Dependence model fit on {len(complete)} complete covariate rows", file=sys.stderr)
    return model


def conditional_1d(dep, i: int, k: int, c_i: float) -> GaussianParams:
    return dep.conditional_1d(i, k, c_i)


def conditional_2d(dep, i: int, k1: int, k2: int, c_i: float) -> Tuple[np.ndarray, np.ndarray]:
    return dep.conditional_2d(i, k1, k2, c_i)
