import numpy as np
import pytest

from hieropo import HierModelConfig, LoggedDataset, LoggedRecord, read_dataset, write_dataset
from hieropo._validation import ConfigurationError
from hieropo.data import DatasetFormatError, dumps_csv, dumps_jsonl, loads_csv, loads_jsonl

from .conftest import random_instance


@pytest.fixture
def dataset():
    _, data = random_instance(np.random.default_rng(0), 3, 4, 25)
    return LoggedDataset(data.tasks, np.arange(25) % 3, data.features, data.rewards, 4, 3, K=3)


def assert_same(a, b):
    assert (a.m, a.d, a.K) == (b.m, b.d, b.K)
    np.testing.assert_array_equal(a.tasks, b.tasks)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.rewards, b.rewards)


@pytest.mark.parametrize("suffix", [".jsonl", ".csv"])
def test_file_roundtrip_is_exact(tmp_path, dataset, suffix):
    path = tmp_path / f"log{suffix}"
    write_dataset(dataset, path)
    assert_same(read_dataset(path), dataset)


def test_files_use_one_based_ids():
    data = LoggedDataset([0, 2], [1, 0], [[0.1], [0.2]], [1.0, 2.0], m=3, d=1, K=2)
    lines = dumps_jsonl(data).splitlines()
    assert lines[0] == '{"m": 3, "d": 1, "K": 2}'
    assert '"task_id": 1' in lines[1] and '"action": 2' in lines[1]
    assert dumps_csv(data).splitlines()[2].startswith("1,2,")


def test_empty_dataset_roundtrip():
    data = LoggedDataset.empty(5, 2)
    text = dumps_jsonl(data)
    assert text.count("\n") == 1
    back = loads_jsonl(text)
    assert len(back) == 0 and back.m == 5


def test_records_roundtrip(dataset):
    back = LoggedDataset.from_records(dataset.records(), dataset.m, dataset.d, dataset.K)
    assert_same(back, dataset)
    assert isinstance(next(dataset.records()), LoggedRecord)


def test_malformed_line_reports_position():
    text = '{"m": 1, "d": 1}\n{"task_id": 1, "action": 1, "features": [0.1], "reward": 1}\n{oops\n'
    with pytest.raises(DatasetFormatError, match=r"log\.jsonl:3"):
        loads_jsonl(text, "log.jsonl")


def test_wrong_feature_count():
    text = '{"m": 1, "d": 2}\n{"task_id": 1, "action": 1, "features": [0.1], "reward": 1}\n'
    with pytest.raises(DatasetFormatError, match=":2: expected 2 features"):
        loads_jsonl(text)


def test_missing_header():
    with pytest.raises(DatasetFormatError, match="header"):
        loads_jsonl('{"task_id": 1, "action": 1, "features": [0.1], "reward": 1}\n')


def test_bad_csv_row():
    text = "task_id,action,reward,f1\n1,1,0.5,0.1\n1,1,zzz,0.1\n"
    with pytest.raises(DatasetFormatError, match=":3:"):
        loads_csv(text, "x.csv")


def test_csv_without_header_infers_sizes():
    data = loads_csv("task_id,action,reward,f1,f2\n2,3,0.5,0.1,0.2\n")
    assert (data.m, data.d, data.K) == (2, 2, 3)
    assert data.tasks[0] == 1 and data.actions[0] == 2


def test_feature_norm_above_one_names_record():
    with pytest.raises(ConfigurationError, match="record 1"):
        LoggedDataset([0, 0], [0, 0], [[0.5, 0.5], [1.2, 0.9]], [0.0, 0.0], 1, 2)


def test_unit_norm_is_accepted():
    LoggedDataset([0], [0], [[0.6, 0.8]], [0.0], 1, 2)


@pytest.mark.parametrize(
    "tasks, actions, rewards, match",
    [([1], [0], [0.0], "task ids"), ([0], [1], [0.0], "actions"), ([0], [0], [np.nan], "non-finite")],
)
def test_rejects_invalid_fields(tasks, actions, rewards, match):
    with pytest.raises(ConfigurationError, match=match):
        LoggedDataset(tasks, actions, [[0.1]], rewards, 1, 1)


def test_arrays_are_read_only(dataset):
    with pytest.raises(ValueError):
        dataset.rewards[0] = 1.0


def test_subset_and_counts(dataset):
    counts = dataset.task_counts()
    assert counts.sum() == len(dataset)
    sub = dataset.subset(2)
    assert len(sub) == counts[2] and sub.m == 1
    np.testing.assert_array_equal(sub.rewards, dataset.rewards[dataset.tasks == 2])


def test_config_dict_roundtrip():
    config = HierModelConfig([0.1, 0.2], [[1.0, 0.3], [0.3, 2.0]], np.eye(2), 0.5)
    back = HierModelConfig.from_dict(config.to_dict())
    np.testing.assert_array_equal(back.sigma_q, config.sigma_q)
    assert back.sigma == 0.5


def test_isotropic_takes_standard_deviations():
    config = HierModelConfig.isotropic(3, 0.5, 2.0, 0.1)
    np.testing.assert_array_equal(config.sigma_q, 0.25 * np.eye(3))
    np.testing.assert_array_equal(config.sigma_0, 4.0 * np.eye(3))
    np.testing.assert_array_equal(config.mu_q, np.zeros(3))
