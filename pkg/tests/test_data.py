import numpy as np
import pandas as pd
import pytest

from src.data import (LOCATION, SPATIAL_TRUTH, SUBJECT, TIME, CsvSchema, Dataset, Record, SplitSpec, gen_heteroscedastic,
                      gen_spatial_population, gen_toy_dependent, load_csv, split_by_subject, write_csv)
from src.errors import ConfigurationError, DataFormatError, InsufficientDataError


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_csv_parses_records_and_missing_covariates(tmp_path):
    path = _write(tmp_path, "subject_id,time,response,x,age,weight\n"
                            "a,0,1.5,0.0,3,14\n"
                            "a,0,2.5,1.0,3,14\n"
                            "b,1,0.5,0.5,7,\n")
    dataset = load_csv(path)
    assert dataset.spatial and dataset.covariate_names == ["age", "weight"]
    c, x, y = dataset.arrays()
    np.testing.assert_array_equal(y, [1.5, 2.5, 0.5])
    np.testing.assert_array_equal(x, [0.0, 1.0, 0.5])
    assert np.isnan(c[2, 1])
    assert dataset.missing_mask().sum() == 1
    assert len(dataset.complete()) == 2
    assert dataset.subjects() == ["a", "b"]


def test_schema_selects_covariates_and_spatial_mode(tmp_path):
    path = _write(tmp_path, "subject_id,time,response,x,age,weight\na,0,1,0.5,3,14\n")
    dataset = load_csv(path, CsvSchema(covariates=["weight"], spatial=False))
    assert dataset.covariate_names == ["weight"] and not dataset.spatial


@pytest.mark.parametrize("body,message", [
    ("a,0,abc,3\n", 'row 1, column "response"'),
    ("a,0,1,3\nb,0,1,x\n", 'row 2, column "age"'),
    ("a,,1,3\n", 'row 1, column "time"'),
    ("a,0.5,1,3\n", "integer"),
    ("a,0,inf,3\n", "Non-finite"),
])
def test_malformed_cells_name_the_row_and_column(tmp_path, body, message):
    path = _write(tmp_path, "subject_id,time,response,age\n" + body)
    with pytest.raises(DataFormatError, match=message):
        load_csv(path)


def test_structural_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_csv(tmp_path / "nope.csv")
    with pytest.raises(DataFormatError, match="response"):
        load_csv(_write(tmp_path, "subject_id,time,age\na,0,1\n"))
    with pytest.raises(DataFormatError, match="height"):
        load_csv(_write(tmp_path, "subject_id,time,response,age\na,0,1,1\n"), CsvSchema(covariates=["height"]))
    with pytest.raises(DataFormatError):
        load_csv(_write(tmp_path, "subject_id,time,response,x,age\na,0,1,1.5,1\n"))


def test_csv_round_trip_is_exact(tmp_path):
    dataset = gen_spatial_population(50, seed=0, n_depths=4, missing_fraction=0.2)
    write_csv(dataset, tmp_path / "out" / "pop.csv")
    restored = load_csv(tmp_path / "out" / "pop.csv")
    for got, want in zip(restored.arrays(), dataset.arrays()):
        np.testing.assert_array_equal(got, want)
    assert restored.frame[SUBJECT].tolist() == dataset.frame[SUBJECT].tolist()


def test_records_round_trip_through_a_dataset():
    records = [Record("s1", 0, np.array([1.0, np.nan]), None, 2.0), Record("s2", 1, np.array([3.0, 4.0]), None, 5.0)]
    dataset = Dataset.from_records(records, ["a", "b"])
    back = dataset.records
    assert [r.subject_id for r in back] == ["s1", "s2"]
    assert np.isnan(back[0].covariates[1]) and back[1].time == 1
    with pytest.raises(ConfigurationError):
        Dataset.from_records([Record("s1", 0, np.array([1.0]), None, 2.0)], ["a", "b"])


def test_dataset_checks_columns():
    frame = pd.DataFrame({SUBJECT: ["a"], TIME: [0], "response": [1.0]})
    with pytest.raises(DataFormatError, match="age"):
        Dataset(frame, ["age"])
    with pytest.raises(DataFormatError, match=LOCATION):
        Dataset(frame.assign(age=1.0), ["age"], spatial=True)


def test_split_partitions_subjects():
    dataset = gen_spatial_population(100, seed=0, n_depths=3, longitudinal_fraction=0.1)
    train, val, test = split_by_subject(dataset, SplitSpec(seed=4))
    groups = [set(part.subjects()) for part in (train, val, test)]
    assert not (groups[0] & groups[1]) and not (groups[0] & groups[2]) and not (groups[1] & groups[2])
    assert set().union(*groups) == set(dataset.subjects())
    assert len(train) + len(val) + len(test) == len(dataset)
    longitudinal = set(dataset.frame.loc[dataset.frame[TIME] == 1, SUBJECT])
    assert longitudinal <= groups[2]
    assert len(groups[2]) == max(20, len(longitudinal))


def test_split_is_reproducible_and_seed_dependent():
    dataset = gen_toy_dependent(200, seed=0)
    a = [part.subjects() for part in split_by_subject(dataset, SplitSpec(seed=1))]
    b = [part.subjects() for part in split_by_subject(dataset, SplitSpec(seed=1))]
    c = [part.subjects() for part in split_by_subject(dataset, SplitSpec(seed=2))]
    assert a == b and a != c


def test_split_needs_three_subjects():
    with pytest.raises(InsufficientDataError):
        split_by_subject(gen_toy_dependent(100, 0).subset(["toy00000", "toy00001"]), SplitSpec())
    three = gen_toy_dependent(100, 0).subset(["toy00000", "toy00001", "toy00002"])
    assert [len(part.subjects()) for part in split_by_subject(three, SplitSpec())] == [1, 1, 1]
    for fraction in (0.4, 0.1):
        with pytest.raises(InsufficientDataError, match="training subject"):
            split_by_subject(three, SplitSpec(train_fraction=fraction))
    with pytest.raises(ConfigurationError):
        SplitSpec(train_fraction=1.0)


def test_toy_generator():
    dataset = gen_toy_dependent(500, seed=0)
    c, _, y = dataset.arrays()
    assert c.shape == (500, 2) and c[:, 0].min() >= -2 and c[:, 0].max() <= 2
    assert np.std(c[:, 1] - np.exp(c[:, 0])) == pytest.approx(0.1, rel=0.15)
    assert np.std(y - np.sin(c[:, 0]) - c[:, 1]) == pytest.approx(0.2, rel=0.15)
    np.testing.assert_array_equal(gen_toy_dependent(500, seed=0).arrays()[2], y)
    with pytest.raises(ConfigurationError):
        gen_toy_dependent(50, seed=0)


def test_heteroscedastic_generator():
    c, _, y = gen_heteroscedastic(4000, seed=0).arrays()
    resid = y - c[:, 0]
    assert np.std(resid[np.abs(c[:, 0]) > 0.8]) > 3 * np.std(resid[np.abs(c[:, 0]) < 0.1])


def test_spatial_population_follows_its_ground_truth():
    dataset = gen_spatial_population(200, seed=1, n_depths=5, longitudinal_fraction=0.3, missing_fraction=0.1)
    frame = dataset.frame
    assert dataset.spatial and dataset.landmarks
    assert frame[LOCATION].nunique() == 5
    follow = frame[frame[TIME] == 1]
    assert len(follow) > 0 and len(follow) % 5 == 0
    missing = frame[frame["height"].isna()]
    assert missing["age"].notna().all() and missing["weight"].notna().all()

    c, x, y = dataset.complete().arrays()
    z = (y - SPATIAL_TRUTH.mean(c, x)) / SPATIAL_TRUTH.sigma(c[:, 0], x)
    assert abs(z.mean()) < 0.1 and z.std() == pytest.approx(1.0, abs=0.1)
    for i in range(3):
        lo = SPATIAL_TRUTH.mean_component(i, np.linspace(1, 10, 20), 0.3)
        assert np.all(np.diff(lo) >= 0)
    with pytest.raises(ConfigurationError):
        gen_spatial_population(10, seed=0)


def test_follow_up_visits_keep_the_true_percentile():
    dataset = gen_spatial_population(80, seed=2, n_depths=4, longitudinal_fraction=1.0)
    c, x, y = dataset.arrays()
    z = (y - SPATIAL_TRUTH.mean(c, x)) / SPATIAL_TRUTH.sigma(c[:, 0], x)
    frame = dataset.frame.assign(z=z)
    wide = frame.pivot_table(index=[SUBJECT, LOCATION], columns=TIME, values="z")
    np.testing.assert_allclose(wide[0], wide[1], atol=1e-9)
