import csv

import numpy as np
import pytest

from dcardnet.config import RunConfig, load_config
from dcardnet.data import read_manifest
from dcardnet.train import (
    CURVE_FIELDS,
    BatchSampler,
    Curves,
    Dataset,
    RunError,
    calibration_subset,
    load_manifest_dataset,
    moving_average,
    read_curves,
    run_training,
    train_model,
)
from dcardnet.tensor import make_rng


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_moving_average_is_trailing_and_skips_gaps():
    assert moving_average([1, 2, 3, 4], 2) == [1, 1.5, 2.5, 3.5]
    assert moving_average([None, 2, None, 4], 3) == [None, 2, 2, 3]


def test_curves_csv_round_trip(tmp_path):
    curves = Curves()
    for step in range(1, 4):
        curves.add(step * 10, 0.01, 1.0 / step, 0.5, None if step == 2 else 0.7, None if step == 2 else 0.6)
    curves.write_csv(tmp_path / "c.csv")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == ",".join(CURVE_FIELDS)
    rows = read_curves(tmp_path / "c.csv")
    assert [r["step"] for r in rows] == [10, 20, 30]
    assert rows[1]["test_loss"] is None
    assert rows[2]["test_loss_smooth"] == pytest.approx(0.7)


def test_batch_sampler_covers_each_pass():
    sampler = BatchSampler(10, 5, make_rng(0))
    seen = np.concatenate([sampler.next(), sampler.next()])
    assert sorted(seen) == list(range(10))


def test_calibration_subset():
    assert calibration_subset(5, 100).tolist() == [0, 1, 2, 3, 4]
    idx = calibration_subset(1000, 100)
    assert len(idx) == 100 and idx[0] == 0 and idx[-1] == 999


def test_train_model_is_deterministic(tiny_dataset, tiny_config):
    root, _ = tiny_dataset
    cfg = load_config(tiny_config).with_overrides(total_steps=6, eval_every=3)
    data = load_manifest_dataset(cfg, root / "manifest.csv")
    m1, s1, c1 = train_model(cfg, data, data, rng_key=(3, 1))
    m2, s2, c2 = train_model(cfg, data, data, rng_key=(3, 1))
    for a, b in zip(m1.state_arrays(), m2.state_arrays()):
        np.testing.assert_array_equal(a[1], b[1])
    assert s1.snapshot() == s2.snapshot()
    assert c1.rows == c2.rows and len(c1.rows) == 2


def test_input_size_mismatch(tiny_dataset):
    root, _ = tiny_dataset
    with pytest.raises(RunError):
        load_manifest_dataset(RunConfig(input_size=64, f=8), root / "manifest.csv")


def test_run_is_byte_identical(tiny_dataset, tiny_config, tmp_path):
    root, _ = tiny_dataset
    cfg = load_config(tiny_config)
    report = run_training(cfg, root / "manifest.csv", tmp_path / "a")
    run_training(cfg, root / "manifest.csv", tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    for name in ("config.txt", "seed.txt", "folds.csv", "metrics_overall.csv", "metrics_perclass.csv",
                 "report.txt", "DONE", "fold_00/checkpoint.dcrd", "fold_01/curves.csv", "fold_01/predictions.csv"):
        assert name in a
    assert len(report.accuracies) == 2
    folds = list(csv.DictReader(open(tmp_path / "a" / "folds.csv")))
    assert sorted(r["sample_id"] for r in folds) == sorted(r.sample_id for r in read_manifest(root / "manifest.csv"))


def test_failure_leaves_marker(tiny_dataset, tiny_config, tmp_path):
    root, _ = tiny_dataset
    cfg = load_config(tiny_config).with_overrides(folds=20)
    with pytest.raises(ValueError):
        run_training(cfg, root / "manifest.csv", tmp_path / "run")
    assert (tmp_path / "run" / "FAILED").exists()
    assert not (tmp_path / "run" / "DONE").exists()


def test_missing_manifest_writes_nothing(tmp_path):
    with pytest.raises(RunError):
        run_training(RunConfig(), tmp_path / "none.csv", tmp_path / "run")
    assert not (tmp_path / "run").exists()


def test_dataset_subset():
    d = Dataset(np.arange(3)[:, None], np.array([0, 1, 0]), ["a", "b", "c"], ["p", "q", "r"], [10, 43, 10])
    s = d.subset(["c", "a"])
    assert s.sample_ids == ["c", "a"] and s.x.ravel().tolist() == [2, 0]
    assert len(d.records()) == 3
