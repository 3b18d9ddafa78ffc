import csv

import numpy as np
import pytest

from dcardnet.metrics import (
    FoldResult,
    aggregate_folds,
    ci95,
    ci95_from_stats,
    confusion_matrix,
    overall_accuracy,
    sensitivity_specificity,
    write_confusion_csv,
    write_metrics_csvs,
)


def test_confusion_and_accuracy():
    cm = confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)
    np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [1, 0, 1]])
    assert overall_accuracy(cm) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 0], 3)
    with pytest.raises(ValueError):
        overall_accuracy(np.zeros((2, 2)))


def test_one_vs_rest_rates():
    cm = np.array([[8, 2], [1, 9]])
    assert sensitivity_specificity(cm, 1) == pytest.approx((0.9, 0.8))
    assert sensitivity_specificity(cm, 0) == pytest.approx((0.8, 0.9))
    assert sensitivity_specificity(np.array([[3, 0], [0, 0]]), 1) == (None, 1.0)


@pytest.mark.parametrize("mean,std,lo,hi", [(95.7, 3.9, 93.3, 98.1), (85.0, 3.6, 82.8, 87.2), (71.0, 4.8, 68.0, 74.0)])
def test_interval_reproduces_reference_ranges(mean, std, lo, hi):
    got = ci95_from_stats(mean, std, 10, clamp=None)
    assert abs(got[0] - lo) <= 0.1 and abs(got[1] - hi) <= 0.1


def test_ci_from_values_uses_sample_std():
    mean, std, lo, hi = ci95([0.8, 0.9, 1.0])
    assert std == pytest.approx(0.1)
    assert lo == pytest.approx(0.9 - 1.96 * 0.1 / np.sqrt(3))
    assert hi == 1.0  # clamped
    with pytest.raises(ValueError):
        ci95([0.5])


def test_aggregation_and_report():
    results = [FoldResult(0, np.array([[5, 0], [1, 4]])), FoldResult(1, np.array([[4, 1], [0, 5]]))]
    report = aggregate_folds(results, level=2)
    assert report.accuracies == [0.9, 0.9]
    assert report.sensitivities[1] == [0.8, 1.0]
    text = report.format_table(["nrDR", "rDR"])
    assert "90.0% +/- 0.0%" in text and "rDR" in text
    with pytest.raises(ValueError):
        aggregate_folds(results[:1], 2)
    with pytest.raises(ValueError):
        aggregate_folds([results[0], FoldResult(1, np.eye(3, dtype=int))], 2)


def test_csv_outputs(tmp_path):
    results = [FoldResult(0, np.array([[2, 0], [0, 0]])), FoldResult(1, np.array([[1, 1], [0, 2]]))]
    write_metrics_csvs(tmp_path, 2, results)
    overall = list(csv.reader(open(tmp_path / "metrics_overall.csv")))
    assert overall == [["level", "fold", "accuracy"], ["2", "0", "1.000000"], ["2", "1", "0.750000"]]
    perclass = list(csv.DictReader(open(tmp_path / "metrics_perclass.csv")))
    assert perclass[1] == {"level": "2", "fold": "0", "class": "1", "sens": "", "spec": "1.000000"}
    write_confusion_csv(tmp_path / "cm.csv", results[1].confusion)
    assert (tmp_path / "cm.csv").read_text().splitlines()[2] == "1,0,2"
