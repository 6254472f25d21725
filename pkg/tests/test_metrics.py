import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lib import InputError
from metrics import (
    AccuracyMatrix,
    compute_metrics,
    mean_report,
    read_metrics,
    write_curve,
    write_metrics,
)

UNEVEN = [[0.5], [0.7, 0.8], [0.6, 0.9, 0.95]]


def test_two_phase_example():
    report = compute_metrics(AccuracyMatrix([[1.0], [0.8, 0.9]]))
    assert report.acc == pytest.approx(0.85)
    assert report.forgetting == pytest.approx(0.2)
    assert report.bwf == pytest.approx(0.2)
    assert report.transfer == pytest.approx(0.2)


def test_forgetting_uses_best_accuracy_ever_reached():
    report = compute_metrics(AccuracyMatrix(UNEVEN))
    assert report.acc == pytest.approx((0.6 + 0.9 + 0.95) / 3)
    assert report.forgetting == pytest.approx(0.05)
    assert report.bwf == pytest.approx(-0.1)
    assert report.transfer == pytest.approx(-0.2 / 3)
    assert_allclose(report.transfer_matrix, [[0, 0, 0], [-0.2, 0, 0], [0.1, -0.1, 0]], atol=1e-12)


def test_constant_matrix_has_no_forgetting():
    report = compute_metrics(AccuracyMatrix([[0.7] * (k + 1) for k in range(4)]))
    assert report.acc == pytest.approx(0.7)
    assert report.forgetting == report.bwf == report.transfer == 0.0


def test_single_phase():
    report = compute_metrics(AccuracyMatrix([[0.42]]))
    assert report.acc == 0.42
    assert report.forgetting == report.bwf == report.transfer == 0.0
    assert report.curve == [(1, 0.42)]


def test_curve_weights_by_class_count():
    report = compute_metrics(AccuracyMatrix(UNEVEN), class_counts=[1, 2, 3])
    assert [seen for seen, _ in report.curve] == [1, 3, 6]
    assert report.curve[1][1] == pytest.approx((0.7 + 2 * 0.8) / 3)
    with pytest.raises(InputError):
        compute_metrics(AccuracyMatrix(UNEVEN), class_counts=[2, 2])


@pytest.mark.parametrize(
    "rows",
    [[], [[0.5, 0.5]], [[0.5], [0.5]], [[1.2]], [[np.nan]], [[0.5], [0.5, -0.1]]],
)
def test_invalid_matrices(rows):
    with pytest.raises(InputError):
        AccuracyMatrix(rows)


def test_upper_triangle_is_undefined():
    a = AccuracyMatrix(UNEVEN)
    assert a.K == 3
    assert np.isnan(a[0, 1]) and a[2, 1] == 0.9


def test_appending_then_truncating_is_identity():
    a = AccuracyMatrix(UNEVEN[:2])
    grown = a.appended([0.1, 0.2, 0.3])
    assert grown.K == 3
    assert grown.truncated(2) == a
    assert a.truncated(2) == a


def test_csv_round_trip(tmp_path):
    path = str(tmp_path / "accuracy_matrix.csv")
    a = AccuracyMatrix([[1 / 3], [0.1, 2 / 3]])
    a.save(path)
    assert AccuracyMatrix.load(path) == a


def test_malformed_csv(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.5\n0.4,zero\n")
    with pytest.raises(InputError, match="malformed"):
        AccuracyMatrix.load(str(path))


def test_metrics_file(tmp_path):
    path = str(tmp_path / "metrics.csv")
    report = compute_metrics(AccuracyMatrix(UNEVEN))
    write_metrics(path, report, {"joint_acc": 0.9})
    values = read_metrics(path)
    assert list(values) == ["acc", "forgetting", "bwf", "transfer", "joint_acc"]
    assert values["acc"] == report.acc and values["joint_acc"] == 0.9


def test_curve_file(tmp_path):
    path = tmp_path / "curve.csv"
    write_curve(str(path), compute_metrics(AccuracyMatrix(UNEVEN), class_counts=[2, 2, 2]))
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["phase", "classes_seen", "accuracy"]
    assert [row[:2] for row in rows[1:]] == [["0", "2"], ["1", "4"], ["2", "6"]]
    assert float(rows[1][2]) == pytest.approx(0.75)


def test_mean_report():
    first = compute_metrics(AccuracyMatrix([[1.0], [0.8, 0.9]]))
    second = compute_metrics(AccuracyMatrix([[0.8], [0.8, 0.7]]))
    mean = mean_report([first, second])
    assert mean.acc == pytest.approx(0.8)
    assert mean.forgetting == pytest.approx(0.1)
    assert mean.curve[1][1] == pytest.approx(0.8)
    with pytest.raises(InputError):
        mean_report([])
