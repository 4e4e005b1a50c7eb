"""Run configuration: YAML file -> dataclasses, with strict keys and derived seeds.

Every sub-seed left unset is derived from the top-level ``seed`` as
``SeedSequence([seed, crc32(name)])`` for the names "split", "atlas",
"dependence" and "sampling", so each stage is reproducible on its own.
"""

import os
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml
from dotenv import load_dotenv

from .atlas_model import ADDITIVE, MLP, AtlasConfig, validate_priors
from .data import DEFAULT_LANDMARKS, SplitSpec
from .dependence_model import DependenceConfig, validate_dependence_priors
from .errors import ConfigurationError
from .marginalization import SamplingConfig
from .nn_core import TrainConfig

CONFIG_ENV = "LUCID_ATLAS_CONFIG"
OUTPUT_DIR_ENV = "LUCID_ATLAS_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs/default"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"

COMPLETE = "complete"
IMPUTE = "impute"

_NESTED = {
    "atlas": AtlasConfig,
    "dependence": DependenceConfig,
    "split": SplitSpec,
    "sampling": SamplingConfig,
    "train": TrainConfig,
}


def derive_seed(seed: int, name: str) -> int:
    state = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)
    return int(state[0])


@dataclass
class RunConfig:
    seed: int = 0
    dataset: Optional[str] = None
    output_dir: str = DEFAULT_OUTPUT_DIR
    covariates: Optional[List[str]] = None
    response: str = "response"      # label used in reports and sidecars
    spatial: Optional[bool] = None
    landmarks: Optional[Dict[str, float]] = None
    priors: Dict[str, str] = field(default_factory=dict)
    dependence_priors: Dict[str, Dict[str, str]] = field(default_factory=dict)
    training_mode: str = COMPLETE
    model_kind: str = ADDITIVE
    atlas: AtlasConfig = field(default_factory=AtlasConfig)
    dependence: DependenceConfig = field(default_factory=DependenceConfig)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(seed=None))
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(seed=None))

    def __post_init__(self):
        if self.training_mode not in (COMPLETE, IMPUTE):
            raise ConfigurationError(f"training_mode must be '{COMPLETE}' or '{IMPUTE}', got {self.training_mode!r}")
        if self.model_kind not in (ADDITIVE, MLP):
            raise ConfigurationError(f"model_kind must be '{ADDITIVE}' or '{MLP}', got {self.model_kind!r}")
        if self.training_mode == IMPUTE and not self.dependence.enabled:
            raise ConfigurationError("training_mode 'impute' needs dependence.enabled")
        self.atlas.model_kind = self.model_kind
        if self.split.seed is None:
            self.split.seed = derive_seed(self.seed, "split")
        if self.atlas.train.seed is None:
            self.atlas.train.seed = derive_seed(self.seed, "atlas")
        if self.dependence.train.seed is None:
            self.dependence.train.seed = derive_seed(self.seed, "dependence")
        if self.sampling.seed is None:
            self.sampling.seed = derive_seed(self.seed, "sampling")

    def stage_seeds(self) -> Dict[str, int]:
        return {"split": self.split.seed, "atlas": self.atlas.train.seed,
                "dependence": self.dependence.train.seed, "sampling": self.sampling.seed}

    def explicit_seeds(self) -> List[str]:
        """Stages whose seed was set by hand rather than derived from ``seed``."""
        return [name for name, value in self.stage_seeds().items() if value != derive_seed(self.seed, name)]

    def check_covariates(self, covariate_names: List[str]):
        validate_priors(self.priors, covariate_names)
        validate_dependence_priors(self.dependence_priors, covariate_names)

    def to_dict(self) -> dict:
        return asdict(self)


def _from_dict(cls, data, prefix: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config section {prefix.rstrip('.') or '<root>'} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"Unknown config key: {prefix}{key}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get(key)
        if nested is not None and is_dataclass(nested):
            kwargs[key] = _from_dict(nested, value, f"{prefix}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Invalid config section {prefix.rstrip('.') or '<root>'}: {e}") from None


def config_from_dict(data: Optional[dict]) -> RunConfig:
    data = dict(data or {})
    # unset seeds are derived from the run seed
    for section in ("split", "sampling"):
        if isinstance(data.get(section), dict):
            data[section] = {"seed": None, **data[section]}
        elif section not in data:
            data[section] = {"seed": None}
    atlas_kind = data["atlas"].get("model_kind") if isinstance(data.get("atlas"), dict) else None
    run_kind = data.get("model_kind", ADDITIVE)
    if atlas_kind is not None and atlas_kind != run_kind:
        print(f"WARNING - atlas.model_kind {atlas_kind!r} is overridden by model_kind {run_kind!r}", file=sys.stderr)
    if "output_dir" not in data and os.getenv(OUTPUT_DIR_ENV):
        data["output_dir"] = os.getenv(OUTPUT_DIR_ENV)
    return _from_dict(RunConfig, data)


def load_config(path=None) -> RunConfig:
    """Load a YAML run config; ``path`` falls back to $LUCID_ATLAS_CONFIG, then to defaults."""
    load_dotenv()
    path = path or os.getenv(CONFIG_ENV)
    if not path:
        return config_from_dict({})
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Could not parse {path}: {e}") from None
    return config_from_dict(data)


def resolved_landmarks(config: RunConfig, spatial: bool) -> Dict[str, float]:
    if config.landmarks is not None:
        return dict(config.landmarks)
    return dict(DEFAULT_LANDMARKS) if spatial else {}


def dump_config(config: RunConfig, directory) -> Path:
    """Write the fully resolved config next to a run's outputs."""
    path = Path(directory) / RESOLVED_CONFIG_NAME
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path
