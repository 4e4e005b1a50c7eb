import json
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import typer
from dotenv import load_dotenv

from .atlas_model import AtlasModel, fit_atlas
from .config import IMPUTE, RunConfig, config_from_dict, dump_config, load_config, resolved_landmarks
from .data import (DEFAULT_LANDMARKS, CsvSchema, gen_heteroscedastic, gen_spatial_population, gen_toy_dependent,
                   load_csv, split_by_subject, write_csv)
from .dependence_model import fit_dependence
from .errors import AtlasError, ConfigurationError
from .inference import (SubjectObservation, evaluate_individualized, gaussian_cdf, impute, impute_dataset,
                        individualized_predict)
from .marginalization import QUADRATURE, SamplingConfig, marginal_curve, write_curve
from .metrics import evaluate, format_report, format_table, report_to_dict
from .model_store import load_dependence, load_model, save_dependence, save_model

app = typer.Typer(help="Interpretable, uncertainty-aware spatial atlases.")

MODEL_FILE = "model.json"
DEPENDENCE_FILE = "dependence.json"
SPLIT_FILE = "split.json"
HISTORY_FILE = "loss_history.csv"
VALIDATION_FILE = "validation_metrics.json"

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _fail(message: str, code: int):
    print(f"ERROR - {message}", file=sys.stderr)
    raise typer.Exit(code)


@contextmanager
def _exit_codes():
    """Map library exceptions onto exit codes: 2 usage/config, 1 runtime."""
    try:
        yield
    except (ConfigurationError, FileNotFoundError) as e:
        _fail(str(e), EXIT_USAGE)
    except AtlasError as e:
        _fail(str(e), EXIT_FAILURE)
    except (OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as e:
        _fail(f"{type(e).__name__}: {e}", EXIT_FAILURE)


@contextmanager
def staged_outputs(output_dir: Path):
    """Yield a staging directory whose files move into ``output_dir`` only on success."""
    output_dir.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=output_dir))
    try:
        yield staging
        for item in sorted(staging.iterdir()):
            target = output_dir / item.name
            if target.exists():
                target.unlink()
            shutil.move(str(item), str(target))
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise FileNotFoundError(f"Input file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from None


def _load_dataset(config: RunConfig, dataset: Optional[Path]):
    path = dataset or (Path(config.dataset) if config.dataset else None)
    if path is None:
        raise ConfigurationError("No dataset given (use --dataset or the 'dataset' config key)")
    schema = CsvSchema(config.covariates, config.spatial, config.landmarks or {})
    ds = load_csv(path, schema)
    if config.landmarks is None:
        ds.landmarks = resolved_landmarks(config, ds.spatial)
    config.check_covariates(ds.covariate_names)
    return ds


def _covariate_vector(value, names) -> np.ndarray:
    """A covariate vector from a JSON list or a {name: value} mapping; null means missing."""
    if isinstance(value, dict):
        unknown = [k for k in value if k not in names]
        if unknown:
            raise ConfigurationError(f"Unknown covariates: {', '.join(unknown)}")
        value = [value.get(name) for name in names]
    if not isinstance(value, list) or len(value) != len(names):
        raise ConfigurationError(f"Expected {len(names)} covariates ({', '.join(names)})")
    return np.array([np.nan if v is None else float(v) for v in value])


@app.command("gen-data")
def gen_data(
    output: Path = typer.Argument(..., help="CSV file to write"),
    kind: str = typer.Option("toy", help="toy | spatial | heteroscedastic"),
    n: int = typer.Option(5000, help="Records (toy, heteroscedastic) or subjects (spatial)"),
    seed: int = typer.Option(0, help="Generator seed"),
    n_depths: int = typer.Option(50, help="Depths per subject (spatial)"),
    longitudinal_fraction: float = typer.Option(0.0, help="Share of subjects with a follow-up visit (spatial)"),
    missing_fraction: float = typer.Option(0.0, help="Share of subjects with a missing covariate (spatial)"),
):
    """Write a synthetic dataset with known ground truth."""
    with _exit_codes():
        if kind == "toy":
            ds = gen_toy_dependent(n, seed)
        elif kind == "heteroscedastic":
            ds = gen_heteroscedastic(n, seed)
        elif kind == "spatial":
            ds = gen_spatial_population(n, seed, n_depths, longitudinal_fraction, missing_fraction)
        else:
            raise ConfigurationError(f"Unknown dataset kind {kind!r}; use toy, spatial or heteroscedastic")
        write_csv(ds, output)
        print(f"INFO - Wrote {len(ds)} records to {output}", file=sys.stderr)


@app.command()
def train(
    config_path: Optional[Path] = typer.Option(None, "--config", help="YAML run config (default $LUCID_ATLAS_CONFIG)"),
    dataset: Optional[Path] = typer.Option(None, help="Dataset CSV (overrides the config)"),
    output_dir: Optional[Path] = typer.Option(None, help="Output directory (overrides the config)"),
    seed: Optional[int] = typer.Option(None, help="Run seed (overrides the config)"),
):
    """Split the data by subject, fit the atlas (and dependence model) and write the run outputs."""
    with _exit_codes():
        config = _config_with_overrides(config_path, seed, output_dir)
        ds = _load_dataset(config, dataset)
        train_ds, val_ds, test_ds = split_by_subject(ds, config.split)
        subjects = {"train": train_ds.subjects(), "val": val_ds.subjects(), "test": test_ds.subjects()}

        dep = None
        if config.dependence.enabled:
            dep = fit_dependence(train_ds, config.dependence, config.dependence_priors)
        if config.training_mode == IMPUTE:
            train_ds, val_ds = impute_dataset(dep, train_ds), impute_dataset(dep, val_ds)
        else:
            train_ds, val_ds = train_ds.complete(), val_ds.complete()

        atlas = fit_atlas(train_ds, config.atlas, config.priors, val_dataset=val_ds if len(val_ds) else None)
        report = evaluate(atlas, val_ds) if len(val_ds) else None

        out = Path(config.output_dir)
        with staged_outputs(out) as staging:
            save_model(staging / MODEL_FILE, atlas, dep)
            pd.DataFrame(atlas.history).to_csv(staging / HISTORY_FILE, index=False, float_format="%.17g")
            _write_json(staging / SPLIT_FILE, subjects)
            _write_json(staging / VALIDATION_FILE, report_to_dict(report) if report else {})
            dump_config(config, staging)
        if report:
            print(format_report(report))
        print(f"INFO - Run outputs written to {out}", file=sys.stderr)


@app.command("train-dependence")
def train_dependence(
    config_path: Optional[Path] = typer.Option(None, "--config", help="YAML run config"),
    dataset: Optional[Path] = typer.Option(None, help="Dataset CSV (overrides the config)"),
    output_dir: Optional[Path] = typer.Option(None, help="Output directory (overrides the config)"),
    seed: Optional[int] = typer.Option(None, help="Run seed (overrides the config)"),
):
    """Fit only the covariate dependence model on the training subjects."""
    with _exit_codes():
        config = _config_with_overrides(config_path, seed, output_dir)
        ds = _load_dataset(config, dataset)
        train_ds, _, _ = split_by_subject(ds, config.split)
        dep = fit_dependence(train_ds, config.dependence, config.dependence_priors)
        out = Path(config.output_dir)
        with staged_outputs(out) as staging:
            save_dependence(staging / DEPENDENCE_FILE, dep)
            dump_config(config, staging)
        print(f"INFO - Dependence model written to {out / DEPENDENCE_FILE}", file=sys.stderr)


@app.command("eval")
def eval_command(
    model: Path = typer.Option(..., help="Trained model.json"),
    dataset: Path = typer.Option(..., help="Dataset CSV"),
    split: str = typer.Option("all", help="all | train | val | test (uses split.json next to the model)"),
    individualized: bool = typer.Option(False, help="Also compare carry / population / individualized predictions"),
    output: Optional[Path] = typer.Option(None, help="Write the report as JSON"),
):
    """Report MARPD, NLL, ECE and 2-sigma coverage (overall and per landmark)."""
    with _exit_codes():
        atlas, _ = load_model(model)
        ds = load_csv(dataset, CsvSchema(atlas.covariate_names, atlas.spatial))
        if atlas.spatial and not ds.landmarks:
            ds.landmarks = dict(DEFAULT_LANDMARKS)
        if split != "all":
            subjects = _read_json(model.parent / SPLIT_FILE)
            if split not in subjects:
                raise ConfigurationError(f"Unknown split {split!r}; use all, train, val or test")
            ds = ds.subset(subjects[split])
        complete = ds.complete()
        if len(complete) < len(ds):
            print(f"INFO - Dropped {len(ds) - len(complete)} of {len(ds)} records with missing covariates "
                  "before evaluation", file=sys.stderr)
        report = evaluate(atlas, complete)
        payload = report_to_dict(report)
        print(format_report(report))
        if individualized:
            longitudinal = evaluate_individualized(atlas, complete, ds.landmarks)
            rows = {"overall": longitudinal.overall, **longitudinal.per_landmark}
            print()
            print(format_table(rows))
            payload["individualized"] = {"pairs": longitudinal.n_pairs, **rows}
        if output:
            _write_json(output, payload)


@app.command()
def marginalize(
    model: Path = typer.Option(..., help="Trained model.json"),
    covariate: str = typer.Option(..., help="Covariate to keep"),
    output: Path = typer.Option(..., help="Curve CSV (a .json sidecar is written next to it)"),
    x: Optional[float] = typer.Option(None, help="Location in [0, 1]; required iff the atlas is spatial"),
    dependence: str = typer.Option("on", help="on | off: condition the other covariates on the kept one"),
    dependence_model: Optional[Path] = typer.Option(None, help="dependence.json (default: the one in model.json)"),
    method: str = typer.Option("mc", help="mc | quadrature"),
    samples: int = typer.Option(2048, help="Monte Carlo samples per grid point"),
    grid_points: int = typer.Option(200, help="Grid points over the covariate's training range"),
    seed: int = typer.Option(0, help="Sampling seed"),
    workers: int = typer.Option(1, help="Threads evaluating grid points"),
):
    """Write the marginal mean and variance decomposition of y over one covariate."""
    with _exit_codes():
        atlas, dep = load_model(model)
        if dependence_model is not None:
            dep = load_dependence(dependence_model)
        if dependence not in ("on", "off"):
            raise ConfigurationError(f"--dependence must be on or off, got {dependence!r}")
        if not isinstance(atlas, AtlasModel):
            raise ConfigurationError("Marginal curves need an additive atlas")
        if atlas.spatial and x is None:
            raise ConfigurationError("This atlas is spatial; --x is required")
        if not atlas.spatial and x is not None:
            raise ConfigurationError("This atlas is not spatial; drop --x")
        if dep is None and atlas.n_covariates > 1:
            raise ConfigurationError(f"{model} holds no dependence model; pass --dependence-model")
        sampling = SamplingConfig(samples, seed, method, grid_points, workers)
        curve = marginal_curve(atlas, dep, covariate, x, sampling=sampling, dependence=dependence == "on")
        output.parent.mkdir(parents=True, exist_ok=True)
        write_curve(curve, output, {"model": str(model), "quadrature": method == QUADRATURE})
        print(f"INFO - Wrote {len(curve.grid)} grid points to {output}", file=sys.stderr)


@app.command("impute")
def impute_command(
    model: Path = typer.Option(..., help="model.json or dependence.json holding a dependence model"),
    input_path: Path = typer.Option(..., "--input", help='JSON {"covariates": [...] or {name: value}}; null = missing'),
):
    """Fill missing covariates from the lowest-variance observed source."""
    with _exit_codes():
        dep = _dependence_from(model)
        request = _read_json(input_path)
        values = _covariate_vector(request.get("covariates"), dep.covariate_names)
        result = impute(dep, values)
        names = dep.covariate_names
        print(json.dumps({
            "covariates": dict(zip(names, result.values.tolist())),
            "sources": {names[i]: names[result.sources[i]] for i in result.imputed},
            "variances": {names[i]: result.variances[i] for i in result.imputed},
        }, indent=2))


@app.command("predict-individual")
def predict_individual(
    model: Path = typer.Option(..., help="Trained model.json"),
    input_path: Path = typer.Option(..., "--input", help="JSON {covariates_t, y_t, covariates_next, x}"),
):
    """Predict a subject's next response assuming their population percentile stays fixed."""
    with _exit_codes():
        atlas, _ = load_model(model)
        request = _read_json(input_path)
        for key in ("covariates_t", "y_t", "covariates_next"):
            if key not in request:
                raise ConfigurationError(f"{input_path}: missing key {key!r}")
        names = atlas.covariate_names
        x = request.get("x")
        obs = SubjectObservation(tuple(_covariate_vector(request["covariates_t"], names)), float(request["y_t"]),
                                 None if x is None else float(x))
        y_next = individualized_predict(atlas, obs, _covariate_vector(request["covariates_next"], names))
        percentile = gaussian_cdf(obs.y, atlas.predict(np.array(obs.covariates), obs.x))
        print(json.dumps({"y_next": y_next, "percentile": percentile}, indent=2))


def _dependence_from(path: Path):
    data = _read_json(path)
    if data.get("atlas") is not None:
        _, dep = load_model(path)
        if dep is None:
            raise ConfigurationError(f"{path} holds no dependence model")
        return dep
    return load_dependence(path)


def _config_with_overrides(config_path: Optional[Path], seed: Optional[int], output_dir: Optional[Path]) -> RunConfig:
    config = load_config(config_path)
    if seed is not None or output_dir is not None:
        data = config.to_dict()
        if seed is not None:
            explicit = config.explicit_seeds()
            if explicit:
                print(f"WARNING - --seed {seed} replaces the explicitly set {', '.join(explicit)} seed(s)",
                      file=sys.stderr)
            # re-derive every sub-seed from the new run seed
            data["seed"] = seed
            data["split"]["seed"] = data["sampling"]["seed"] = None
            data["atlas"]["train"]["seed"] = data["dependence"]["train"]["seed"] = None
        if output_dir is not None:
            data["output_dir"] = str(output_dir)
        config = config_from_dict(data)
    return config


def main():
    load_dotenv()
    app()


if __name__ == "__main__":
    main()
