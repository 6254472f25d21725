"""
Accuracy matrix bookkeeping and the continual-learning metrics.

a[k][j] is the test accuracy on the classes of phase j after training through
phase k, defined for j <= k only.
"""
import csv
import typing as t
from dataclasses import dataclass, field

import numpy as np

from lib import InputError


class AccuracyMatrix:
    def __init__(self, rows: t.Sequence[t.Sequence[float]]):
        rows = [list(map(float, row)) for row in rows]
        if not rows:
            raise InputError("accuracy matrix needs at least one phase")
        K = len(rows)
        a = np.full((K, K), np.nan)
        for k, row in enumerate(rows):
            if len(row) != k + 1:
                raise InputError(f"row {k} has {len(row)} entries, expected {k + 1}")
            a[k, : k + 1] = row
        lower = a[np.tril_indices(K)]
        if not np.all(np.isfinite(lower)):
            raise InputError("accuracy matrix has non-finite entries")
        if np.any(lower < 0.0) or np.any(lower > 1.0):
            raise InputError("accuracies must lie in [0, 1]")
        self.a = a

    @property
    def K(self) -> int:
        return self.a.shape[0]

    def __getitem__(self, index):
        return self.a[index]

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.a, other.a, equal_nan=True)

    def rows(self) -> t.List[t.List[float]]:
        return [list(self.a[k, : k + 1]) for k in range(self.K)]

    def appended(self, row: t.Sequence[float]) -> "AccuracyMatrix":
        return AccuracyMatrix(self.rows() + [list(row)])

    def truncated(self, K: int) -> "AccuracyMatrix":
        return AccuracyMatrix(self.rows()[:K])

    def save(self, filename: str):
        with open(filename, "w", newline="") as f:
            writer = csv.writer(f)
            for row in self.rows():
                writer.writerow([repr(float(x)) for x in row])

    @classmethod
    def load(cls, filename: str) -> "AccuracyMatrix":
        with open(filename, newline="") as f:
            try:
                rows = [[float(x) for x in row] for row in csv.reader(f) if row]
            except ValueError as err:
                raise InputError(f"malformed accuracy matrix {filename}") from err
        return cls(rows)


@dataclass
class MetricsReport:
    acc: float
    forgetting: float
    bwf: float
    transfer: float
    transfer_matrix: np.ndarray
    curve: t.List[t.Tuple[int, float]] = field(default_factory=list)

    def scalars(self) -> t.Dict[str, float]:
        return {
            "acc": self.acc,
            "forgetting": self.forgetting,
            "bwf": self.bwf,
            "transfer": self.transfer,
        }


def compute_metrics(
    a: AccuracyMatrix, class_counts: t.Optional[t.Sequence[int]] = None
) -> MetricsReport:
    """
    Acc: mean final-row accuracy.
    F: mean over earlier phases of the best accuracy ever reached minus the final one.
    BwF: mean over earlier phases of just-learned accuracy minus the final one.
    T_F(j <- i): accuracy drop on phase j caused by learning phase i, j < i.
    """
    K = a.K
    class_counts = [1] * K if class_counts is None else list(class_counts)
    if len(class_counts) != K:
        raise InputError(f"{len(class_counts)} class counts for {K} phases")
    final = a[K - 1, :K]
    acc = float(np.mean(final))

    transfer_matrix = np.zeros((K, K))
    if K == 1:
        forgetting = bwf = transfer = 0.0
    else:
        old = range(K - 1)
        forgetting = float(np.mean([np.max(a[j:K, j]) - final[j] for j in old]))
        bwf = float(np.mean([a[j, j] - final[j] for j in old]))
        for i in range(1, K):
            transfer_matrix[i, :i] = a[i - 1, :i] - a[i, :i]
        transfer = float(np.mean(transfer_matrix[np.tril_indices(K, -1)]))

    weights = np.asarray(class_counts, dtype=np.float64)
    curve = []
    for k in range(K):
        seen = weights[: k + 1]
        curve.append((int(seen.sum()), float(np.dot(a[k, : k + 1], seen) / seen.sum())))
    return MetricsReport(acc, forgetting, bwf, transfer, transfer_matrix, curve)


def mean_report(reports: t.Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise InputError("nothing to average")
    return MetricsReport(
        acc=float(np.mean([r.acc for r in reports])),
        forgetting=float(np.mean([r.forgetting for r in reports])),
        bwf=float(np.mean([r.bwf for r in reports])),
        transfer=float(np.mean([r.transfer for r in reports])),
        transfer_matrix=np.mean([r.transfer_matrix for r in reports], axis=0),
        curve=[
            (points[0][0], float(np.mean([p[1] for p in points])))
            for points in zip(*(r.curve for r in reports))
        ],
    )


def write_metrics(filename: str, report: MetricsReport, extra: t.Optional[t.Dict[str, float]] = None):
    values = dict(report.scalars())
    values.update(extra or {})
    with open(filename, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for name, value in values.items():
            writer.writerow([name, repr(float(value))])


def read_metrics(filename: str) -> t.Dict[str, float]:
    with open(filename, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        return {name: float(value) for name, value in reader}


def write_curve(filename: str, report: MetricsReport):
    with open(filename, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["phase", "classes_seen", "accuracy"])
        for phase, (seen, accuracy) in enumerate(report.curve):
            writer.writerow([phase, seen, repr(accuracy)])
