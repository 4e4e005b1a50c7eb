"""Versioned JSON files for trained atlases and dependence models.

Keys are sorted and floats written with repr precision, so the same seed
produces a byte-identical file.
"""

import json
from pathlib import Path
from typing import Optional, Tuple

from .atlas_model import atlas_from_dict
from .dependence_model import DependenceModel
from .errors import ConfigurationError
from .nn_core import FORMAT_VERSION


def _write(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"format_version": FORMAT_VERSION, **payload}, sort_keys=True, indent=1) + "\n")
    return path


def _read(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Model file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from None
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    return data


def save_model(path, atlas, dependence: Optional[DependenceModel] = None) -> Path:
    payload = {"atlas": atlas.to_dict()}
    if dependence is not None:
        payload["dependence"] = dependence.to_dict()
    return _write(path, payload)


def load_model(path) -> Tuple[object, Optional[DependenceModel]]:
    """(atlas, dependence model or None)."""
    data = _read(path)
    if "atlas" not in data:
        raise ConfigurationError(f"{path} holds no atlas")
    dependence = DependenceModel.from_dict(data["dependence"]) if data.get("dependence") else None
    return atlas_from_dict(data["atlas"]), dependence


def save_dependence(path, dependence: DependenceModel) -> Path:
    return _write(path, {"dependence": dependence.to_dict()})


def load_dependence(path) -> DependenceModel:
    data = _read(path)
    if not data.get("dependence"):
        raise ConfigurationError(f"{path} holds no dependence model")
    return DependenceModel.from_dict(data["dependence"])
