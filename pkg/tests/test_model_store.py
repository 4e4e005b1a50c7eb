import json

import numpy as np
import pytest

from src.atlas_model import AtlasConfig, JointMLPModel, Scaler
from src.dependence_model import DependenceConfig, DependenceModel
from src.errors import ConfigurationError
from src.model_store import load_dependence, load_model, save_dependence, save_model


def _dependence(seed=0):
    dep = DependenceModel.initialize(["c1", "c2", "c3"], [0, 0, 0], [1, 2, 3], DependenceConfig(hidden_width=4),
                                     np.random.default_rng(seed), priors={"c1": {"c2": "increasing"}})
    dep.trained = True
    return dep


def test_atlas_and_dependence_round_trip(random_atlas, tmp_path):
    atlas = random_atlas(n_covariates=3, spatial=True, priors={"c2": "increasing"})
    dep = _dependence()
    save_model(tmp_path / "model.json", atlas, dep)
    restored, restored_dep = load_model(tmp_path / "model.json")
    c = np.random.default_rng(0).uniform(size=(8, 3))
    for got, want in zip(restored.predict_batch(c, 0.2), atlas.predict_batch(c, 0.2)):
        np.testing.assert_array_equal(got, want)
    for got, want in zip(restored_dep.conditional_batch(0, [0.3]), dep.conditional_batch(0, [0.3])):
        np.testing.assert_array_equal(got, want)
    assert restored_dep.priors == dep.priors


def test_saving_is_byte_identical(random_atlas, tmp_path):
    atlas = random_atlas(n_covariates=2)
    a = save_model(tmp_path / "a.json", atlas).read_bytes()
    b = save_model(tmp_path / "b.json", random_atlas(n_covariates=2)).read_bytes()
    assert a == b
    assert json.loads(a)["format_version"] == 1


def test_atlas_without_dependence(random_atlas, tmp_path):
    save_model(tmp_path / "m.json", random_atlas(n_covariates=1))
    _, dep = load_model(tmp_path / "m.json")
    assert dep is None
    with pytest.raises(ConfigurationError, match="no dependence"):
        load_dependence(tmp_path / "m.json")


def test_mlp_baseline_round_trip(tmp_path):
    model = JointMLPModel.initialize(["a", "b"], Scaler.identity(2), False, AtlasConfig(hidden_width=4),
                                     np.random.default_rng(0))
    save_model(tmp_path / "mlp.json", model)
    restored, _ = load_model(tmp_path / "mlp.json")
    assert isinstance(restored, JointMLPModel)
    assert restored.predict([0.1, 0.2]) == model.predict([0.1, 0.2])


def test_dependence_file_round_trip(tmp_path):
    dep = _dependence(seed=3)
    save_dependence(tmp_path / "dep" / "dependence.json", dep)
    restored = load_dependence(tmp_path / "dep" / "dependence.json")
    np.testing.assert_array_equal(restored.quantiles, dep.quantiles)
    with pytest.raises(ConfigurationError, match="no atlas"):
        load_model(tmp_path / "dep" / "dependence.json")


def test_unreadable_files_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_model(tmp_path / "missing.json")
    (tmp_path / "garbage.json").write_text("{not json")
    with pytest.raises(ConfigurationError, match="not valid JSON"):
        load_model(tmp_path / "garbage.json")
    (tmp_path / "old.json").write_text(json.dumps({"format_version": 99, "atlas": {}}))
    with pytest.raises(ConfigurationError, match="format_version"):
        load_model(tmp_path / "old.json")
