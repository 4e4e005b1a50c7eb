"""Datasets: CSV ingestion, subject-wise splitting and synthetic generators.

CSV contract
    Header names ``subject_id``, ``time``, ``response``, an optional ``x``
    (spatial location in [0, 1]) and the covariate columns. Empty cells in
    covariate columns mean "missing"; every other cell must be numeric.
    Error messages count data rows from 1 (the header is not a row).
"""

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigurationError, DataFormatError, InsufficientDataError

SUBJECT = "subject_id"
TIME = "time"
RESPONSE = "response"
LOCATION = "x"
RESERVED_COLUMNS = (SUBJECT, TIME, RESPONSE, LOCATION)

# Depths along a normalized airway centerline (nasal spine at 0, carina at 1).
DEFAULT_LANDMARKS = {
    "nasal_spine": 0.0,
    "choana": 0.2,
    "epiglottic_tip": 0.45,
    "tvc": 0.6,
    "subglottis": 0.7,
    "carina": 1.0,
}


@dataclass(frozen=True)
class Record:
    subject_id: str
    time: int
    covariates: np.ndarray   # NaN marks a missing entry
    x: Optional[float]
    y: float


@dataclass
class Dataset:
    frame: pd.DataFrame
    covariate_names: List[str]
    spatial: bool = False
    landmarks: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        required = [SUBJECT, TIME, RESPONSE] + ([LOCATION] if self.spatial else []) + list(self.covariate_names)
        missing = [c for c in required if c not in self.frame.columns]
        if missing:
            raise DataFormatError(f"Dataset is missing columns: {', '.join(missing)}")
        if not self.covariate_names:
            raise ConfigurationError("A dataset needs at least one covariate")
        self.frame = self.frame[required].reset_index(drop=True)
        self.frame[SUBJECT] = self.frame[SUBJECT].astype(str)
        if (self.frame[SUBJECT].str.len() == 0).any():
            raise DataFormatError("Empty subject_id")
        if self.spatial:
            x = self.frame[LOCATION].to_numpy(dtype=float)
            if np.any((x < 0) | (x > 1)) or np.any(~np.isfinite(x)):
                raise DataFormatError("Spatial locations x must lie in [0, 1]")

    @classmethod
    def from_records(cls, records: Sequence[Record], covariate_names: List[str], spatial: bool = False,
                     landmarks: Optional[Dict[str, float]] = None) -> "Dataset":
        rows = []
        for r in records:
            if len(r.covariates) != len(covariate_names):
                raise ConfigurationError(
                    f"Record {r.subject_id} has {len(r.covariates)} covariates, expected {len(covariate_names)}"
                )
            row = {SUBJECT: r.subject_id, TIME: r.time, RESPONSE: r.y}
            if spatial:
                row[LOCATION] = r.x
            row.update(zip(covariate_names, (float(v) for v in r.covariates)))
            rows.append(row)
        return cls(pd.DataFrame(rows), list(covariate_names), spatial, dict(landmarks or {}))

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def records(self) -> List[Record]:
        c, x, y = self.arrays()
        subjects = self.frame[SUBJECT].tolist()
        times = self.frame[TIME].astype(int).tolist()
        return [Record(subjects[k], times[k], c[k].copy(), None if x is None else float(x[k]), float(y[k]))
                for k in range(len(self))]

    def arrays(self) -> Tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
        """(covariates (n, N) with NaN for missing, locations (n,) or None, responses (n,))."""
        c = self.frame[self.covariate_names].to_numpy(dtype=float)
        x = self.frame[LOCATION].to_numpy(dtype=float) if self.spatial else None
        return c, x, self.frame[RESPONSE].to_numpy(dtype=float)

    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.frame[self.covariate_names].to_numpy(dtype=float))

    def subjects(self) -> List[str]:
        return sorted(self.frame[SUBJECT].unique().tolist())

    def _like(self, frame: pd.DataFrame) -> "Dataset":
        return Dataset(frame.reset_index(drop=True), list(self.covariate_names), self.spatial, dict(self.landmarks))

    def complete(self) -> "Dataset":
        return self._like(self.frame[~self.missing_mask().any(axis=1)])

    def subset(self, subject_ids) -> "Dataset":
        return self._like(self.frame[self.frame[SUBJECT].isin(set(subject_ids))])

    def with_covariates(self, covariates: np.ndarray) -> "Dataset":
        frame = self.frame.copy()
        frame[self.covariate_names] = covariates
        return self._like(frame)

    def with_responses(self, responses: np.ndarray) -> "Dataset":
        frame = self.frame.copy()
        frame[RESPONSE] = responses
        return self._like(frame)


@dataclass
class CsvSchema:
    covariates: Optional[List[str]] = None   # None: every non-reserved column
    spatial: Optional[bool] = None           # None: spatial iff an ``x`` column exists
    landmarks: Dict[str, float] = field(default_factory=dict)


def _parse_column(raw: pd.Series, column: str, allow_missing: bool) -> np.ndarray:
    values = np.empty(len(raw))
    for row, cell in enumerate(raw.tolist(), start=1):
        cell = cell.strip()
        if cell == "":
            if not allow_missing:
                raise DataFormatError(f"Empty value at row {row}, column \"{column}\"")
            values[row - 1] = np.nan
            continue
        try:
            values[row - 1] = float(cell)
        except ValueError:
            raise DataFormatError(f"Non-numeric value {cell!r} at row {row}, column \"{column}\"") from None
        if not math.isfinite(values[row - 1]):
            raise DataFormatError(f"Non-finite value {cell!r} at row {row}, column \"{column}\"")
    return values


def load_csv(path, schema: Optional[CsvSchema] = None) -> Dataset:
    """Parse a CSV file into a Dataset; one record per data row."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)

    for column in (SUBJECT, TIME, RESPONSE):
        if column not in raw.columns:
            raise DataFormatError(f"{path}: missing mandatory column \"{column}\"")
    spatial = LOCATION in raw.columns if schema.spatial is None else schema.spatial
    if spatial and LOCATION not in raw.columns:
        raise DataFormatError(f"{path}: spatial dataset needs an \"{LOCATION}\" column")
    covariates = schema.covariates or [c for c in raw.columns if c not in RESERVED_COLUMNS]
    absent = [c for c in covariates if c not in raw.columns]
    if absent:
        raise DataFormatError(f"{path}: missing covariate columns {', '.join(absent)}")

    frame = pd.DataFrame({SUBJECT: raw[SUBJECT].str.strip()})
    times = _parse_column(raw[TIME], TIME, allow_missing=False)
    if np.any(times != np.round(times)):
        raise DataFormatError(f"{path}: column \"{TIME}\" must hold integer ordinal times")
    frame[TIME] = times.astype(int)
    frame[RESPONSE] = _parse_column(raw[RESPONSE], RESPONSE, allow_missing=False)
    if spatial:
        frame[LOCATION] = _parse_column(raw[LOCATION], LOCATION, allow_missing=False)
    for name in covariates:
        frame[name] = _parse_column(raw[name], name, allow_missing=True)
    print(f"DEBUG - Loaded {len(frame)} records, {len(covariates)} covariates from {path}",
          file=sys.stderr)
    return Dataset(frame, list(covariates), spatial, dict(schema.landmarks))


def write_csv(dataset: Dataset, path):
    """Write with 17 significant digits so load_csv reproduces every value exactly."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    dataset.frame.to_csv(path, index=False, float_format="%.17g", na_rep="")


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    validation_fraction: float = 0.15
    seed: Optional[int] = 0
    longitudinal_to_test: bool = True

    def __post_init__(self):
        for name in ("train_fraction", "validation_fraction"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ConfigurationError(f"{name} must be in (0, 1), got {value}")


def split_subjects(subjects: Sequence[str], fraction: float, rng: np.random.Generator) -> Tuple[list, list]:
    """Shuffle ``subjects`` and return (kept, carved) with round(fraction * n) carved out."""
    order = [subjects[k] for k in rng.permutation(len(subjects))]
    n_carved = int(round(fraction * len(order)))
    return sorted(order[n_carved:]), sorted(order[:n_carved])


def split_by_subject(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Partition subjects (never records) into train / validation / test."""
    subjects = dataset.subjects()
    if len(subjects) < 3:
        raise InsufficientDataError(f"Need at least 3 subjects to split, got {len(subjects)}")
    rng = np.random.default_rng(spec.seed)

    visits = dataset.frame.groupby(SUBJECT)[TIME].nunique()
    forced = sorted(visits[visits > 1].index.tolist()) if spec.longitudinal_to_test else []
    pool = [s for s in subjects if s not in set(forced)]
    n_test = int(round((1.0 - spec.train_fraction) * len(subjects)))
    need = max(0, n_test - len(forced))
    train, test = split_subjects(pool, need / len(pool) if pool else 0.0, rng)
    test = sorted(test + forced)
    if len(train) < 2:
        raise InsufficientDataError(
            f"Split leaves {len(train)} training subject(s); at least 2 are needed to carve out validation"
        )

    n_val = min(len(train) - 1, max(1, int(round(spec.validation_fraction * len(train)))))
    train, val = split_subjects(train, n_val / len(train), rng)
    print(f"DEBUG - Split {len(subjects)} subjects: {len(train)} train / {len(val)} val / {len(test)} test "
          f"({len(forced)} longitudinal forced to test)", file=sys.stderr)
    return dataset.subset(train), dataset.subset(val), dataset.subset(test)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def gen_toy_dependent(n: int, seed: int) -> Dataset:
    """c1 ~ U[-2, 2], c2 = exp(c1) + N(0, 0.01), y = sin(c1) + c2 + N(0, 0.04) (variances)."""
    if n < 100:
        raise ConfigurationError(f"gen_toy_dependent needs n >= 100, got {n}")
    rng = np.random.default_rng(seed)
    c1 = rng.uniform(-2.0, 2.0, n)
    c2 = np.exp(c1) + rng.normal(0.0, 0.1, n)
    y = np.sin(c1) + c2 + rng.normal(0.0, 0.2, n)
    frame = pd.DataFrame({SUBJECT: [f"toy{k:05d}" for k in range(n)], TIME: 0, RESPONSE: y, "c1": c1, "c2": c2})
    return Dataset(frame, ["c1", "c2"])


def gen_heteroscedastic(n: int, seed: int) -> Dataset:
    """c1 ~ U[-1, 1], y = c1 + (0.1 + |c1|) * eps."""
    rng = np.random.default_rng(seed)
    c1 = rng.uniform(-1.0, 1.0, n)
    y = c1 + (0.1 + np.abs(c1)) * rng.normal(size=n)
    frame = pd.DataFrame({SUBJECT: [f"het{k:05d}" for k in range(n)], TIME: 0, RESPONSE: y, "c1": c1})
    return Dataset(frame, ["c1"])


class SpatialTruth:
    """Ground truth of ``gen_spatial_population``.

    Covariates (age, weight, height) with weight and height noisy monotone
    functions of age. Every mean component is non-decreasing in its own
    covariate at every depth x, and sigma grows with age at every x.
    """

    covariate_names = ["age", "weight", "height"]

    def draw_covariates(self, n: int, rng: np.random.Generator) -> np.ndarray:
        age = rng.uniform(0.5, 18.0, n)
        weight = self.weight_trend(age) + rng.normal(0.0, 2.5, n)
        height = self.height_trend(age) + rng.normal(0.0, 4.0, n)
        return np.column_stack([age, np.maximum(weight, 2.0), height])

    @staticmethod
    def weight_trend(age):
        return 4.0 + 3.2 * np.asarray(age)

    @staticmethod
    def height_trend(age):
        return 55.0 + 24.0 * np.sqrt(np.asarray(age))

    @staticmethod
    def mean_component(i: int, c, x):
        c, x = np.asarray(c, dtype=float), np.asarray(x, dtype=float)
        if i == 0:
            return 2.0 * c * (1.0 + 0.5 * np.sin(np.pi * x))
        if i == 1:
            return 0.4 * c * (1.0 + x)
        if i == 2:
            return 0.15 * (c - 50.0) * (1.2 - 0.4 * x) + 15.0 * np.cos(2.0 * np.pi * x)
        raise ConfigurationError(f"Spatial ground truth has 3 covariates, got index {i}")

    @staticmethod
    def sigma(age, x):
        return 2.0 + 0.6 * np.asarray(age) * (1.0 + 0.5 * np.asarray(x))

    def mean(self, covariates: np.ndarray, x) -> np.ndarray:
        covariates = np.atleast_2d(covariates)
        return sum(self.mean_component(i, covariates[:, i], x) for i in range(3))


SPATIAL_TRUTH = SpatialTruth()


def gen_spatial_population(n_subjects: int, seed: int, n_depths: int = 50, longitudinal_fraction: float = 0.0,
                           missing_fraction: float = 0.0) -> Dataset:
    """Airway-like spatial population with 3 dependent covariates and known truth.

    ``longitudinal_fraction`` of the subjects get a follow-up visit (time 1)
    a few months to a year later; the follow-up reuses the subject's noise
    draw, so its true population percentile is unchanged.
    ``missing_fraction`` of the subjects have their height left blank.
    """
    if n_subjects < 50:
        raise ConfigurationError(f"gen_spatial_population needs n_subjects >= 50, got {n_subjects}")
    rng = np.random.default_rng(seed)
    truth = SPATIAL_TRUTH
    depths = np.linspace(0.0, 1.0, n_depths)
    covariates = truth.draw_covariates(n_subjects, rng)
    noise = rng.normal(size=(n_subjects, n_depths))
    follow_up = rng.uniform(size=n_subjects) < longitudinal_fraction
    dropped = rng.uniform(size=n_subjects) < missing_fraction
    gaps = rng.uniform(0.3, 1.0, n_subjects)

    frames = []
    for s in range(n_subjects):
        visits = [covariates[s]]
        if follow_up[s]:
            age, weight, height = covariates[s]
            later = age + gaps[s]
            visits.append(np.array([
                later,
                weight + truth.weight_trend(later) - truth.weight_trend(age),
                height + truth.height_trend(later) - truth.height_trend(age),
            ]))
        for t, c in enumerate(visits):
            y = truth.mean(c[None, :], depths) + truth.sigma(c[0], depths) * noise[s]
            frame = pd.DataFrame({SUBJECT: f"sp{s:04d}", TIME: t, RESPONSE: y, LOCATION: depths})
            for name, value in zip(truth.covariate_names, c):
                frame[name] = value
            if dropped[s]:
                frame["height"] = np.nan
            frames.append(frame)
    return Dataset(pd.concat(frames, ignore_index=True), list(truth.covariate_names), True, dict(DEFAULT_LANDMARKS))
