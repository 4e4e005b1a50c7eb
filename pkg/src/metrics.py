"""Evaluation metrics: MARPD, predictive NLL, calibration error and coverage.

MARPD here is the symmetric form

    100 * mean( |y_hat - y| / ((|y_hat| + |y|) / 2) )

and ECE is quantile calibration: for levels p = (k + 0.5) / bins the
observed fraction of truths with predicted CDF <= p is compared with p.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf
from tabulate import tabulate

from .atlas_model import GaussianParams, gaussian_nll
from .data import Dataset
from .errors import ConfigurationError, DomainError, InsufficientDataError


def _pair(predictions, truths) -> Tuple[np.ndarray, np.ndarray]:
    predictions = np.asarray(predictions, dtype=float).ravel()
    truths = np.asarray(truths, dtype=float).ravel()
    if len(predictions) != len(truths):
        raise ConfigurationError(f"{len(predictions)} predictions for {len(truths)} truths")
    if len(truths) == 0:
        raise InsufficientDataError("Metrics need at least one sample")
    return predictions, truths


def _moments(params) -> Tuple[np.ndarray, np.ndarray]:
    """Accept a sequence of GaussianParams or a (means, variances) pair of arrays."""
    if len(params) and isinstance(params[0], GaussianParams):
        return (np.array([p.mean for p in params]), np.array([p.variance for p in params]))
    means, variances = params
    return np.asarray(means, dtype=float).ravel(), np.asarray(variances, dtype=float).ravel()


def marpd(predictions, truths) -> float:
    predictions, truths = _pair(predictions, truths)
    denom = (np.abs(predictions) + np.abs(truths)) / 2.0
    if np.any(denom == 0):
        raise DomainError(f"Prediction and truth are both zero at index {int(np.flatnonzero(denom == 0)[0])}")
    return float(100.0 * np.mean(np.abs(predictions - truths) / denom))


def mean_nll(params, truths) -> float:
    means, variances = _moments(params)
    means, truths = _pair(means, truths)
    if np.any(variances <= 0):
        raise DomainError("All predicted variances must be > 0")
    return float(np.mean(gaussian_nll(means, variances, truths)))


def predicted_cdf(params, truths) -> np.ndarray:
    means, variances = _moments(params)
    means, truths = _pair(means, truths)
    if np.any(variances <= 0):
        raise DomainError("All predicted variances must be > 0")
    return 0.5 * (1.0 + erf((truths - means) / np.sqrt(2.0 * variances)))


def ece(params, truths, bins: int = 10) -> float:
    cdf = predicted_cdf(params, truths)
    if len(cdf) < bins:
        raise InsufficientDataError(f"ECE with {bins} levels needs at least {bins} samples, got {len(cdf)}")
    levels = (np.arange(bins) + 0.5) / bins
    observed = (cdf[None, :] <= levels[:, None]).mean(axis=1)
    return float(np.mean(np.abs(observed - levels)))


def coverage(params, truths, k: float = 2.0) -> float:
    """Fraction of truths inside mean +- k * sigma."""
    means, variances = _moments(params)
    means, truths = _pair(means, truths)
    return float(np.mean(np.abs(truths - means) <= k * np.sqrt(variances)))


def landmark_depths(depths: Sequence[float], landmarks: Dict[str, float]) -> Dict[str, float]:
    """Map each named landmark to the nearest available depth."""
    depths = np.asarray(depths, dtype=float)
    if len(depths) == 0:
        return {}
    return {name: float(depths[np.argmin(np.abs(depths - x))]) for name, x in landmarks.items()}


@dataclass
class EvalReport:
    marpd: float
    nll: float
    ece: float
    coverage: float
    n: int
    per_landmark: Dict[str, Dict[str, float]] = field(default_factory=dict)


def _scores(means, variances, truths) -> Dict[str, float]:
    params = (means, variances)
    scores = {"marpd": marpd(means, truths), "nll": mean_nll(params, truths), "coverage": coverage(params, truths)}
    scores["ece"] = ece(params, truths) if len(truths) >= 10 else math.nan
    scores["n"] = len(truths)
    return scores


def evaluate(atlas, dataset: Dataset, landmarks: Optional[Dict[str, float]] = None) -> EvalReport:
    c, x, y = dataset.arrays()
    means, variances = atlas.predict_batch(c, x)
    report = EvalReport(**_scores(means, variances, y))
    landmarks = dataset.landmarks if landmarks is None else landmarks
    if x is not None and landmarks:
        for name, depth in landmark_depths(np.unique(x), landmarks).items():
            mask = x == depth
            report.per_landmark[name] = _scores(means[mask], variances[mask], y[mask])
    return report


def report_to_dict(report: EvalReport) -> dict:
    def clean(value):
        return None if isinstance(value, float) and math.isnan(value) else value

    return {
        "marpd": report.marpd,
        "nll": report.nll,
        "ece": clean(report.ece),
        "coverage": report.coverage,
        "n": report.n,
        "per_landmark": {name: {k: clean(v) for k, v in row.items()} for name, row in report.per_landmark.items()},
    }


def format_report(report: EvalReport) -> str:
    rows = [["overall", report.n, report.marpd, report.nll, report.ece, report.coverage]]
    for name, row in report.per_landmark.items():
        rows.append([name, row["n"], row["marpd"], row["nll"], row["ece"], row["coverage"]])
    return tabulate(rows, headers=["group", "n", "MARPD (%)", "NLL", "ECE", "cov. 2sd"], floatfmt=".4f")


def format_table(rows: Dict[str, Dict[str, float]], index: str = "group") -> str:
    """Aligned table of named rows of scores (e.g. prediction modes per landmark)."""
    if not rows:
        return ""
    columns = list(next(iter(rows.values())).keys())
    body = [[name] + [row[c] for c in columns] for name, row in rows.items()]
    return tabulate(body, headers=[index] + columns, floatfmt=".4f")


def main():
    # Simple checks
    assert marpd([3.0], [1.0]) == 100.0
    assert marpd([1.0, 2.0], [2.0, 1.0]) == marpd([2.0, 1.0], [1.0, 2.0])
    assert abs(mean_nll(([0.0], [1.0]), [0.0]) - 0.5 * math.log(2 * math.pi)) < 1e-12
    assert abs(mean_nll(([1.0], [1.0 / (2 * math.pi)]), [1.0])) < 1e-12
    assert abs(ece((np.zeros(100), np.ones(100)), np.zeros(100)) - 0.25) < 1e-12
    rng = np.random.default_rng(0)
    truths = rng.standard_normal(10_000)
    print(f"calibrated ECE {ece((np.zeros(10_000), np.ones(10_000)), truths):.4f}, "
          f"overconfident ECE {ece((np.zeros(10_000), np.full(10_000, 0.01)), truths):.4f}")
    print("All metric checks passed.")


if __name__ == "__main__":
    main()
