"""The additive atlas: y | c, x ~ N(f^m(c, x), f^v(c, x)).

    f^m(c, x) = beta + sum_i f^m_i(c_i, x)
    f^v(c, x) =        sum_i f^v_i(c_i, x)

Subnetwork i has a mean head f^m_i (GeLU MLP, or a monotone Lipschitz
network when a prior is declared for c_i) and a variance head f^v_i (GeLU
MLP with softplus output) that sees (c_i, x, f^m_i). Each f^v_i carries
floor/N so the predicted variance is exactly the sum of the contributions.

Internally covariates and x are min-max scaled to [0, 1] and the response
is standardized; everything returned to callers is in original units.
"""

import math
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import Dataset, split_subjects
from .errors import ConfigurationError, DomainError, InsufficientDataError, MissingCovariateError
from .monotone_net import MonotoneNetwork, network_from_dict
from .nn_core import GELU, LINEAR, SOFTPLUS, DenseNetwork, TrainConfig, TrainResult, train_loop

INCREASING = "increasing"
DECREASING = "decreasing"
PRIOR_DIRECTIONS = (INCREASING, DECREASING)

ADDITIVE = "additive"
MLP = "mlp"

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianParams:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise DomainError(f"Gaussian parameters must be finite, got ({self.mean}, {self.variance})")
        if self.variance <= 0:
            raise DomainError(f"Variance must be > 0, got {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def gaussian_nll(mean, variance, y) -> np.ndarray:
    """Elementwise 0.5 * log(2 pi v) + (y - m)^2 / (2 v)."""
    mean, variance, y = (np.asarray(a, dtype=float) for a in (mean, variance, y))
    if np.any(variance <= 0):
        raise DomainError("Variance must be > 0 in the Gaussian NLL")
    return _HALF_LOG_2PI + 0.5 * np.log(variance) + (y - mean) ** 2 / (2.0 * variance)


def nll_loss(params: GaussianParams, y: float) -> float:
    if params.variance <= 0:
        raise DomainError(f"Variance must be > 0, got {params.variance}")
    return float(gaussian_nll(params.mean, params.variance, y))


@dataclass
class Scaler:
    """Training-set statistics used to normalize inputs and response."""
    c_min: List[float]
    c_max: List[float]
    c_q25: List[float]
    c_q75: List[float]
    y_mean: float = 0.0
    y_std: float = 1.0
    x_min: float = 0.0
    x_max: float = 1.0

    @classmethod
    def fit(cls, covariates: np.ndarray, x: Optional[np.ndarray], y: np.ndarray) -> "Scaler":
        y_std = float(np.std(y))
        return cls(
            c_min=np.nanmin(covariates, axis=0).tolist(),
            c_max=np.nanmax(covariates, axis=0).tolist(),
            c_q25=np.nanpercentile(covariates, 25, axis=0).tolist(),
            c_q75=np.nanpercentile(covariates, 75, axis=0).tolist(),
            y_mean=float(np.mean(y)),
            y_std=y_std if y_std > 0 else 1.0,
            x_min=0.0 if x is None else float(np.min(x)),
            x_max=1.0 if x is None else float(np.max(x)),
        )

    @classmethod
    def identity(cls, n_covariates: int) -> "Scaler":
        return cls([0.0] * n_covariates, [1.0] * n_covariates, [0.25] * n_covariates, [0.75] * n_covariates)

    def _range(self, i: int) -> float:
        span = self.c_max[i] - self.c_min[i]
        return span if span > 0 else 1.0

    def covariate(self, i: int, c) -> np.ndarray:
        return (np.asarray(c, dtype=float) - self.c_min[i]) / self._range(i)

    def covariates(self, c: np.ndarray) -> np.ndarray:
        return np.column_stack([self.covariate(i, c[:, i]) for i in range(c.shape[1])])

    def location(self, x) -> np.ndarray:
        span = self.x_max - self.x_min
        return (np.asarray(x, dtype=float) - self.x_min) / (span if span > 0 else 1.0)

    def response(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def iqr(self, i: int) -> float:
        return self.c_q75[i] - self.c_q25[i]

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "Scaler":
        return cls(**data)


@dataclass
class AtlasConfig:
    hidden_width: int = 128
    lipschitz: float = 1.0
    group_size: int = 2
    variance_floor: float = 1e-6
    model_kind: str = ADDITIVE
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.model_kind not in (ADDITIVE, MLP):
            raise ConfigurationError(f"model_kind must be '{ADDITIVE}' or '{MLP}', got {self.model_kind!r}")
        if self.hidden_width % self.group_size:
            raise ConfigurationError("hidden_width must be divisible by group_size")
        if not self.lipschitz > 0 or not self.variance_floor > 0:
            raise ConfigurationError("lipschitz and variance_floor must be > 0")


class Subnetwork:
    """f_i(c_i, x) -> (f^m_i, f^v_i) in normalized units."""

    def __init__(self, mean_net: Union[DenseNetwork, MonotoneNetwork], variance_net: DenseNetwork,
                 prior: Optional[str], floor_share: float):
        self.mean_net = mean_net
        self.variance_net = variance_net
        self.prior = prior
        self.floor_share = floor_share

    @classmethod
    def initialize(cls, spatial: bool, prior: Optional[str], config: AtlasConfig, floor_share: float,
                   rng: np.random.Generator) -> "Subnetwork":
        d_in = 2 if spatial else 1
        width = config.hidden_width
        if prior:
            mean_net = MonotoneNetwork.initialize([d_in, width, 1], rng, config.lipschitz, [0], [1],
                                                  group_size=config.group_size)
        else:
            mean_net = DenseNetwork.initialize([d_in, width, 1], rng, GELU)
        variance_net = DenseNetwork.initialize([d_in + 1, width, 1], rng, GELU, [SOFTPLUS])
        return cls(mean_net, variance_net, prior, floor_share)

    def _mean_input(self, c: np.ndarray, x: Optional[np.ndarray]) -> np.ndarray:
        # decreasing priors reuse the increasing construction on -c
        signed = -c if self.prior == DECREASING else c
        return signed[:, None] if x is None else np.column_stack([signed, x])

    @staticmethod
    def _variance_input(c, x, m) -> np.ndarray:
        return np.column_stack([c, m]) if x is None else np.column_stack([c, x, m])

    def forward(self, c: np.ndarray, x: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        m = self.mean_net.forward(self._mean_input(c, x))[:, 0]
        v = self.variance_net.forward(self._variance_input(c, x, m))[:, 0] + self.floor_share
        return m, v

    def forward_trace(self, c, x):
        m_out, mean_trace = self.mean_net.forward_trace(self._mean_input(c, x))
        m = m_out[:, 0]
        v_out, var_trace = self.variance_net.forward_trace(self._variance_input(c, x, m))
        return m, v_out[:, 0] + self.floor_share, (mean_trace, var_trace)

    def backward(self, traces, d_mean: np.ndarray, d_var: np.ndarray) -> List[np.ndarray]:
        mean_trace, var_trace = traces
        var_grads, d_var_input = self.variance_net.backward(var_trace, d_var[:, None])
        # the mean contribution is also an input of the variance head
        mean_grads, _ = self.mean_net.backward(mean_trace, (d_mean + d_var_input[:, -1])[:, None])
        return mean_grads + var_grads

    def parameters(self) -> List[np.ndarray]:
        return self.mean_net.parameters() + self.variance_net.parameters()

    def project(self):
        if isinstance(self.mean_net, MonotoneNetwork):
            self.mean_net.project()

    def to_dict(self) -> dict:
        return {"prior": self.prior, "floor_share": self.floor_share,
                "mean": self.mean_net.to_dict(), "variance": self.variance_net.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Subnetwork":
        return cls(network_from_dict(data["mean"]), DenseNetwork.from_dict(data["variance"]),
                   data.get("prior"), float(data["floor_share"]))


class _GaussianRegressor:
    """Shared input handling, NLL and unit conversion for atlas models."""

    kind = ""

    def __init__(self, covariate_names: List[str], scaler: Scaler, spatial: bool, variance_floor: float):
        self.covariate_names = list(covariate_names)
        self.scaler = scaler
        self.spatial = spatial
        self.variance_floor = variance_floor
        self.history: List[dict] = []

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def covariate_index(self, name_or_index) -> int:
        if isinstance(name_or_index, str):
            if name_or_index not in self.covariate_names:
                raise ConfigurationError(
                    f"Unknown covariate {name_or_index!r}; model covariates are {', '.join(self.covariate_names)}"
                )
            return self.covariate_names.index(name_or_index)
        i = int(name_or_index)
        if not 0 <= i < self.n_covariates:
            raise ConfigurationError(f"Covariate index {i} out of range 0..{self.n_covariates - 1}")
        return i

    def _locations(self, x, n: int) -> Optional[np.ndarray]:
        if not self.spatial:
            return None
        if x is None:
            raise ConfigurationError("This atlas is spatial; a location x is required")
        x = np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()
        if np.any((x < 0) | (x > 1)):
            raise ConfigurationError("Locations x must lie in [0, 1]")
        return self.scaler.location(x)

    def _normalized_inputs(self, c, x) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        c = np.atleast_2d(np.asarray(c, dtype=float))
        if c.shape[1] != self.n_covariates:
            raise ConfigurationError(f"Expected {self.n_covariates} covariates, got {c.shape[1]}")
        if np.isnan(c).any():
            raise MissingCovariateError("Covariates contain missing entries; impute them before predicting")
        return self.scaler.covariates(c), self._locations(x, c.shape[0])

    def _forward_std(self, c_norm, x_norm) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def predict_batch(self, c, x=None) -> Tuple[np.ndarray, np.ndarray]:
        """Means and variances (original units) for a batch of covariate rows."""
        mean, var = self._forward_std(*self._normalized_inputs(c, x))
        s = self.scaler
        return s.y_mean + s.y_std * mean, s.y_std ** 2 * var

    def predict(self, c, x=None) -> GaussianParams:
        mean, var = self.predict_batch(np.asarray(c, dtype=float)[None, :], x)
        return GaussianParams(float(mean[0]), float(var[0]))

    def batch_from(self, dataset: Dataset) -> tuple:
        c, x, y = dataset.arrays()
        c_norm, x_norm = self._normalized_inputs(c, x)
        return c_norm, x_norm, self.scaler.response(y)

    def loss(self, batch) -> float:
        c, x, y = batch
        mean, var = self._forward_std(c, x)
        return float(np.mean(gaussian_nll(mean, var, y)))


class AtlasModel(_GaussianRegressor):
    kind = ADDITIVE

    def __init__(self, covariate_names, priors: Dict[str, str], scaler: Scaler, spatial: bool,
                 subnetworks: List[Subnetwork], intercept: float = 0.0, variance_floor: float = 1e-6):
        super().__init__(covariate_names, scaler, spatial, variance_floor)
        self.priors = dict(priors)
        self.subnetworks = subnetworks
        self.intercept = np.array([float(intercept)])

    @classmethod
    def initialize(cls, covariate_names: List[str], scaler: Scaler, spatial: bool, config: AtlasConfig,
                   rng: np.random.Generator, priors: Optional[Dict[str, str]] = None) -> "AtlasModel":
        priors = validate_priors(priors or {}, covariate_names)
        share = config.variance_floor / len(covariate_names)
        subnetworks = [Subnetwork.initialize(spatial, priors.get(name), config, share, rng)
                       for name in covariate_names]
        return cls(covariate_names, priors, scaler, spatial, subnetworks, 0.0, config.variance_floor)

    # --- training interface -------------------------------------------------

    def parameters(self) -> List[np.ndarray]:
        params = [self.intercept]
        for sub in self.subnetworks:
            params.extend(sub.parameters())
        return params

    def project(self):
        for sub in self.subnetworks:
            sub.project()

    def _forward_std(self, c_norm, x_norm):
        mean = np.full(c_norm.shape[0], self.intercept[0])
        var = np.zeros(c_norm.shape[0])
        for i, sub in enumerate(self.subnetworks):
            m, v = sub.forward(c_norm[:, i], x_norm)
            mean += m
            var += v
        return mean, var

    def loss_and_grads(self, batch) -> Tuple[float, List[np.ndarray]]:
        c, x, y = batch
        n = len(y)
        mean = np.full(n, self.intercept[0])
        var = np.zeros(n)
        traces = []
        for i, sub in enumerate(self.subnetworks):
            m, v, trace = sub.forward_trace(c[:, i], x)
            mean += m
            var += v
            traces.append(trace)
        resid = mean - y
        loss = float(np.mean(_HALF_LOG_2PI + 0.5 * np.log(var) + resid ** 2 / (2.0 * var)))
        d_mean = resid / var / n
        d_var = (0.5 / var - 0.5 * resid ** 2 / var ** 2) / n
        grads = [np.array([d_mean.sum()])]
        for sub, trace in zip(self.subnetworks, traces):
            grads.extend(sub.backward(trace, d_mean, d_var))
        return loss, grads

    # --- interpretation ----------------------------------------------------

    @property
    def intercept_value(self) -> float:
        """beta in response units."""
        return self.scaler.y_mean + self.scaler.y_std * float(self.intercept[0])

    def contributions(self, i, c_i, x=None) -> Tuple[np.ndarray, np.ndarray]:
        """(f^m_i, f^v_i) in response units for an array of c_i values."""
        i = self.covariate_index(i)
        c_i = np.atleast_1d(np.asarray(c_i, dtype=float))
        if np.isnan(c_i).any():
            raise MissingCovariateError(f"Missing values for covariate {self.covariate_names[i]}")
        m, v = self.subnetworks[i].forward(self.scaler.covariate(i, c_i), self._locations(x, len(c_i)))
        return self.scaler.y_std * m, self.scaler.y_std ** 2 * v

    def predict_batch(self, c, x=None) -> Tuple[np.ndarray, np.ndarray]:
        c = np.atleast_2d(np.asarray(c, dtype=float))
        self._normalized_inputs(c, x)
        mean = np.full(c.shape[0], self.intercept_value)
        var = np.zeros(c.shape[0])
        for i in range(self.n_covariates):
            m, v = self.contributions(i, c[:, i], x)
            mean += m
            var += v
        return mean, var

    def disentangle(self, i, c_i: float, x=None) -> Tuple[float, float]:
        m, v = self.contributions(i, [c_i], x)
        return float(m[0]), float(v[0])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "covariate_names": self.covariate_names,
            "priors": self.priors,
            "spatial": self.spatial,
            "variance_floor": self.variance_floor,
            "scaler": self.scaler.to_dict(),
            "intercept": float(self.intercept[0]),
            "subnetworks": [sub.to_dict() for sub in self.subnetworks],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AtlasModel":
        return cls(data["covariate_names"], data.get("priors", {}), Scaler.from_dict(data["scaler"]),
                   bool(data["spatial"]), [Subnetwork.from_dict(s) for s in data["subnetworks"]],
                   float(data["intercept"]), float(data["variance_floor"]))


class JointMLPModel(_GaussianRegressor):
    """MLP+NLL baseline: one network maps (c, x) to (mean, variance), no additive structure."""

    kind = MLP

    def __init__(self, covariate_names, scaler: Scaler, spatial: bool, net: DenseNetwork, variance_floor: float):
        super().__init__(covariate_names, scaler, spatial, variance_floor)
        self.priors: Dict[str, str] = {}
        self.net = net

    @classmethod
    def initialize(cls, covariate_names, scaler: Scaler, spatial: bool, config: AtlasConfig,
                   rng: np.random.Generator) -> "JointMLPModel":
        d_in = len(covariate_names) + (1 if spatial else 0)
        net = DenseNetwork.initialize([d_in, config.hidden_width, 2], rng, GELU, [LINEAR, SOFTPLUS])
        return cls(covariate_names, scaler, spatial, net, config.variance_floor)

    @staticmethod
    def _input(c, x):
        return c if x is None else np.column_stack([c, x])

    def parameters(self):
        return self.net.parameters()

    def project(self):
        pass

    def _forward_std(self, c_norm, x_norm):
        out = self.net.forward(self._input(c_norm, x_norm))
        return out[:, 0], out[:, 1] + self.variance_floor

    def loss_and_grads(self, batch):
        c, x, y = batch
        n = len(y)
        out, trace = self.net.forward_trace(self._input(c, x))
        mean, var = out[:, 0], out[:, 1] + self.variance_floor
        resid = mean - y
        loss = float(np.mean(_HALF_LOG_2PI + 0.5 * np.log(var) + resid ** 2 / (2.0 * var)))
        upstream = np.column_stack([resid / var / n, (0.5 / var - 0.5 * resid ** 2 / var ** 2) / n])
        grads, _ = self.net.backward(trace, upstream)
        return loss, grads

    def disentangle(self, i, c_i, x=None):
        raise ConfigurationError("The MLP+NLL baseline has no additive structure to disentangle")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "covariate_names": self.covariate_names,
            "priors": {},
            "spatial": self.spatial,
            "variance_floor": self.variance_floor,
            "scaler": self.scaler.to_dict(),
            "network": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JointMLPModel":
        return cls(data["covariate_names"], Scaler.from_dict(data["scaler"]), bool(data["spatial"]),
                   DenseNetwork.from_dict(data["network"]), float(data["variance_floor"]))


def atlas_from_dict(data: dict):
    kind = data.get("kind", ADDITIVE)
    if kind == ADDITIVE:
        return AtlasModel.from_dict(data)
    if kind == MLP:
        return JointMLPModel.from_dict(data)
    raise ConfigurationError(f"Unknown atlas kind: {kind}")


def validate_priors(priors: Dict[str, str], covariate_names: Sequence[str]) -> Dict[str, str]:
    for name, direction in priors.items():
        if name not in covariate_names:
            raise ConfigurationError(f"Prior declared for unknown covariate {name!r}")
        if direction not in PRIOR_DIRECTIONS:
            raise ConfigurationError(f"Prior for {name!r} must be one of {PRIOR_DIRECTIONS}, got {direction!r}")
    return {name: priors[name] for name in covariate_names if priors.get(name)}


def _check_trainable(dataset: Dataset):
    if len(dataset) == 0:
        raise InsufficientDataError("Cannot fit an atlas on an empty dataset")
    mask = dataset.missing_mask()
    for i, name in enumerate(dataset.covariate_names):
        if mask[:, i].all():
            raise InsufficientDataError(f"Covariate {name!r} is missing in every record")
    if mask.any():
        raise MissingCovariateError(
            f"{int(mask.any(axis=1).sum())} records have missing covariates; drop or impute them before fitting"
        )


def fit_atlas(dataset: Dataset, config: Optional[AtlasConfig] = None, priors: Optional[Dict[str, str]] = None,
              val_dataset: Optional[Dataset] = None):
    """Fit an atlas (or the MLP+NLL baseline) by minimizing the Gaussian NLL.

    Validation uses ``val_dataset`` when given, otherwise a subject-wise
    ``validation_fraction`` carve-out of ``dataset``.
    """
    config = config or AtlasConfig()
    _check_trainable(dataset)
    train_cfg = config.train
    seed = 0 if train_cfg.seed is None else train_cfg.seed
    rng = np.random.default_rng(seed)

    if val_dataset is None and len(dataset.subjects()) >= 2:
        keep, carved = split_subjects(dataset.subjects(), train_cfg.validation_fraction, rng)
        if carved and keep:
            dataset, val_dataset = dataset.subset(keep), dataset.subset(carved)
    if val_dataset is not None:
        _check_trainable(val_dataset)

    c, x, y = dataset.arrays()
    scaler = Scaler.fit(c, x, y)
    if config.model_kind == MLP:
        model = JointMLPModel.initialize(dataset.covariate_names, scaler, dataset.spatial, config, rng)
    else:
        model = AtlasModel.initialize(dataset.covariate_names, scaler, dataset.spatial, config, rng, priors)

    batch_size = train_cfg.batch_size or (1024 if dataset.spatial else 32)
    run_cfg = TrainConfig(**{**train_cfg.__dict__, "batch_size": batch_size, "seed": seed})
    print(f"INFO - Fitting {config.model_kind} atlas on {len(dataset)} records "
          f"({dataset.n_covariates} covariates, priors: {model.priors or 'none'})", file=sys.stderr)
    result: TrainResult = train_loop(
        model, model.batch_from(dataset), run_cfg,
        val_data=None if val_dataset is None else model.batch_from(val_dataset), name=f"{config.model_kind} atlas",
    )
    model.history = result.history
    return model


def predict(model, c, x=None) -> GaussianParams:
    return model.predict(c, x)


def disentangle(model, i, c_i: float, x=None) -> Tuple[float, float]:
    return model.disentangle(i, c_i, x)
