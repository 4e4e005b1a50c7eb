import pytest
import yaml

from src.config import (CONFIG_ENV, OUTPUT_DIR_ENV, RESOLVED_CONFIG_NAME, config_from_dict, derive_seed, dump_config,
                        load_config, resolved_landmarks)
from src.data import DEFAULT_LANDMARKS
from src.errors import ConfigurationError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    monkeypatch.chdir(tmp_path)


def test_unset_seeds_are_derived_per_stage():
    config = config_from_dict({"seed": 7})
    assert config.split.seed == derive_seed(7, "split")
    assert config.atlas.train.seed == derive_seed(7, "atlas")
    assert config.dependence.train.seed == derive_seed(7, "dependence")
    assert config.sampling.seed == derive_seed(7, "sampling")
    assert len({config.split.seed, config.atlas.train.seed, config.dependence.train.seed, config.sampling.seed}) == 4
    assert derive_seed(7, "atlas") != derive_seed(8, "atlas")


def test_explicit_seeds_win():
    config = config_from_dict({"seed": 7, "split": {"seed": 5}, "atlas": {"train": {"seed": 11}}})
    assert config.split.seed == 5
    assert config.atlas.train.seed == 11
    assert config.sampling.seed == derive_seed(7, "sampling")


def test_nested_sections_are_parsed():
    config = config_from_dict({
        "model_kind": "mlp",
        "atlas": {"hidden_width": 16, "train": {"max_epochs": 3, "learning_rate": 0.001}},
        "dependence": {"enabled": False},
        "sampling": {"samples": 512, "method": "quadrature"},
        "priors": {"age": "increasing"},
    })
    assert config.atlas.hidden_width == 16 and config.atlas.train.max_epochs == 3
    assert config.atlas.model_kind == "mlp"
    assert not config.dependence.enabled
    assert config.sampling.samples == 512 and config.sampling.method == "quadrature"


@pytest.mark.parametrize("data,key", [
    ({"sed": 1}, "sed"),
    ({"atlas": {"width": 3}}, "atlas.width"),
    ({"atlas": {"train": {"lr": 0.1}}}, "atlas.train.lr"),
])
def test_unknown_keys_are_named(data, key):
    with pytest.raises(ConfigurationError, match=f"Unknown config key: {key}$"):
        config_from_dict(data)


def test_invalid_values_are_configuration_errors():
    with pytest.raises(ConfigurationError):
        config_from_dict({"atlas": 3})
    with pytest.raises(ConfigurationError):
        config_from_dict({"training_mode": "drop"})
    with pytest.raises(ConfigurationError):
        config_from_dict({"training_mode": "impute", "dependence": {"enabled": False}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"sampling": {"samples": 10}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"priors": {"age": "up"}}).check_covariates(["age"])
    with pytest.raises(ConfigurationError):
        config_from_dict({"priors": {"height": "increasing"}}).check_covariates(["age"])


def test_load_config_reads_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 3\ndataset: data.csv\natlas:\n  hidden_width: 8\n")
    config = load_config(path)
    assert config.seed == 3 and config.dataset == "data.csv" and config.atlas.hidden_width == 8


def test_load_config_falls_back_to_the_environment(tmp_path, monkeypatch):
    path = tmp_path / "env.yaml"
    path.write_text("seed: 9\n")
    monkeypatch.setenv(CONFIG_ENV, str(path))
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "out"))
    config = load_config()
    assert config.seed == 9
    assert config.output_dir == str(tmp_path / "out")


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="missing.yaml"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigurationError, match="Could not parse"):
        load_config(bad)


def test_defaults_without_a_file():
    config = load_config()
    assert config.seed == 0 and config.training_mode == "complete" and config.dependence.enabled


def test_resolved_config_reloads_to_the_same_run(tmp_path):
    config = config_from_dict({"seed": 4, "priors": {"age": "increasing"}, "landmarks": {"tvc": 0.6}})
    path = dump_config(config, tmp_path)
    assert path.name == RESOLVED_CONFIG_NAME
    assert config_from_dict(yaml.safe_load(path.read_text())).to_dict() == config.to_dict()


def test_resolved_landmarks():
    assert resolved_landmarks(config_from_dict({}), spatial=True) == DEFAULT_LANDMARKS
    assert resolved_landmarks(config_from_dict({}), spatial=False) == {}
    assert resolved_landmarks(config_from_dict({"landmarks": {"tvc": 0.6}}), spatial=True) == {"tvc": 0.6}


def test_conflicting_model_kinds_warn(capsys):
    config = config_from_dict({"atlas": {"model_kind": "mlp"}})
    assert config.atlas.model_kind == "additive"
    assert "atlas.model_kind 'mlp' is overridden by model_kind 'additive'" in capsys.readouterr().err
    config_from_dict({"model_kind": "mlp", "atlas": {"model_kind": "mlp"}})
    config_from_dict({"model_kind": "mlp"})
    assert "WARNING" not in capsys.readouterr().err


def test_explicit_seeds_are_reported():
    assert config_from_dict({"seed": 3}).explicit_seeds() == []
    config = config_from_dict({"seed": 3, "split": {"seed": 5}, "dependence": {"train": {"seed": 6}}})
    assert config.explicit_seeds() == ["split", "dependence"]
    assert config_from_dict(config.to_dict()).explicit_seeds() == ["split", "dependence"]
