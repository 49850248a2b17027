import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, computed_field
from sklearn.metrics import pairwise_distances_chunked
from sklearn.preprocessing import StandardScaler

from ..errors import DomainError
from .artifacts import write_rows_csv

logger = logging.getLogger(__name__)

MM_PER_M = 1000.0
REPORT_COLUMNS = ("model", "rmse_train_mm", "rmse_test_mm", "mae_train_mm", "mae_test_mm", "train_time_s")
HISTOGRAM_COLUMNS = ("bin_left_mm", "bin_right_mm", "count")

# Column index of the highest-frequency raw depth feature (31.25 MHz).
RAW_DEPTH_COLUMN = 3

Predictor = Callable[[np.ndarray], np.ndarray]
Trainer = Callable[[np.ndarray, np.ndarray], Predictor]


@dataclass(frozen=True)
class ErrorStats:
    mae: float
    rmse: float
    bias: float
    max_abs: float
    n: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> List[Tuple[float, float, int]]:
        return [(float(a), float(b), int(c)) for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def error_stats(predicted: Sequence[float], truth: Sequence[float]) -> ErrorStats:
    predicted = np.asarray(predicted, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if predicted.shape != truth.shape:
        raise DomainError(f"length mismatch: {predicted.size} predictions for {truth.size} targets")
    if predicted.size == 0:
        raise DomainError("error statistics need at least one sample")
    err = (predicted - truth) * MM_PER_M
    mae = float(np.mean(np.abs(err)))
    # sqrt(mean(e^2)) can round an ulp below mean(|e|) when all |e| are equal
    rmse = max(float(np.sqrt(np.mean(err**2))), mae)
    return ErrorStats(
        mae=mae,
        rmse=rmse,
        bias=float(np.mean(err)),
        max_abs=float(np.max(np.abs(err))),
        n=int(err.size),
    )


def histogram(errors_mm: Sequence[float], bin_width: float) -> Histogram:
    """Uniform bins of ``bin_width`` aligned to multiples of the width."""
    if not bin_width > 0:
        raise DomainError(f"bin width must be > 0, got {bin_width}")
    errors = np.asarray(errors_mm, dtype=float).ravel()
    if errors.size == 0:
        raise DomainError("cannot histogram an empty error list")
    if not np.all(np.isfinite(errors)):
        raise DomainError("errors must be finite")

    lo, hi = float(errors.min()), float(errors.max())
    first = math.floor(lo / bin_width)
    last = max(first + 1, math.ceil(hi / bin_width))
    # float division can land one bin short on either side
    while first * bin_width > lo:
        first -= 1
    while last * bin_width < hi:
        last += 1
    edges = np.arange(first, last + 1) * bin_width
    counts, _ = np.histogram(errors, bins=edges)
    return Histogram(edges=edges, counts=counts)


def write_histogram_csv(hist: Histogram, path: Path) -> Path:
    return write_rows_csv(path, HISTOGRAM_COLUMNS, hist.rows())


# ---------------------------------------------------------------------------
# KNN baseline
# ---------------------------------------------------------------------------

class KnnModel:
    """k-nearest-neighbour regressor on z-scored features.

    Distances are Euclidean in the standardized space; equal distances are
    resolved in favour of the lower training index.
    """

    def __init__(self, k: int = 5, n_jobs: Optional[int] = None):
        if k < 1:
            raise DomainError(f"k must be >= 1, got {k}")
        self.k = k
        self.n_jobs = n_jobs
        self.scaler = StandardScaler()
        self.x_train: Optional[np.ndarray] = None
        self.y_train: Optional[np.ndarray] = None

    def fit(self, x_train: np.ndarray, y_train: np.ndarray) -> "KnnModel":
        x_train = np.asarray(x_train, dtype=float)
        y_train = np.asarray(y_train, dtype=float).ravel()
        if len(x_train) != len(y_train):
            raise DomainError("feature and target counts differ")
        if self.k > len(x_train):
            raise DomainError(f"k={self.k} exceeds the {len(x_train)} training samples")
        self.x_train = self.scaler.fit_transform(x_train)
        self.y_train = y_train
        return self

    def _nearest_targets(self, dist: np.ndarray, start: int) -> np.ndarray:
        k = self.k
        kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
        means = np.empty(len(dist))
        for row, (d, limit) in enumerate(zip(dist, kth)):
            candidates = np.flatnonzero(d <= limit)
            order = np.lexsort((candidates, d[candidates]))[:k]
            means[row] = self.y_train[candidates[order]].mean()
        return means

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.x_train is None:
            raise ValueError("Model must be trained before prediction")
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        queries = self.scaler.transform(np.atleast_2d(x))
        chunks = pairwise_distances_chunked(
            queries, self.x_train, reduce_func=self._nearest_targets, metric="euclidean", n_jobs=self.n_jobs
        )
        predictions = np.concatenate(list(chunks))
        return predictions[0] if single else predictions


def knn_fit(x_train: np.ndarray, y_train: np.ndarray, k: int, n_jobs: Optional[int] = None) -> KnnModel:
    return KnnModel(k=k, n_jobs=n_jobs).fit(x_train, y_train)


def knn_predict(model: KnnModel, x: np.ndarray) -> np.ndarray:
    return model.predict(x)


# ---------------------------------------------------------------------------
# Comparison report
# ---------------------------------------------------------------------------

class ReportRow(BaseModel):
    model: str
    rmse_train_mm: float
    rmse_test_mm: float
    mae_train_mm: float
    mae_test_mm: float
    train_time_s: float
    mae_reduction_pct: Optional[float] = None


def raw_depth_predictor(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float)[:, RAW_DEPTH_COLUMN]


def comparison_report(
    trainers: Dict[str, Trainer],
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    raw_test_mae_mm: Optional[float] = None,
) -> List[ReportRow]:
    """Fit every trainer on the training split and score it on both splits.

    ``raw_test_mae_mm`` is the uncorrected test MAE; when given, each row also
    carries the relative MAE reduction against it.
    """
    if not trainers:
        raise DomainError("comparison report needs at least one model")
    rows: List[ReportRow] = []
    for name, trainer in trainers.items():
        started = time.perf_counter()
        predictor = trainer(x_train, y_train)
        elapsed = time.perf_counter() - started
        train_stats = error_stats(predictor(x_train), y_train)
        test_stats = error_stats(predictor(x_test), y_test)
        reduction = None
        if raw_test_mae_mm:
            reduction = 100.0 * (1.0 - test_stats.mae / raw_test_mae_mm)
        rows.append(
            ReportRow(
                model=name,
                rmse_train_mm=train_stats.rmse,
                rmse_test_mm=test_stats.rmse,
                mae_train_mm=train_stats.mae,
                mae_test_mm=test_stats.mae,
                train_time_s=elapsed,
                mae_reduction_pct=reduction,
            )
        )
        logger.info("%s: test MAE %.3f mm, test RMSE %.3f mm (%.1fs)", name, test_stats.mae, test_stats.rmse, elapsed)
    return rows


def write_report_csv(rows: Sequence[ReportRow], path: Path) -> Path:
    header = REPORT_COLUMNS + ("mae_reduction_pct",)
    body = [
        [getattr(row, col) for col in REPORT_COLUMNS] + ["" if row.mae_reduction_pct is None else row.mae_reduction_pct]
        for row in rows
    ]
    return write_rows_csv(path, header, body)


def format_report_text(rows: Sequence[ReportRow]) -> str:
    """Metrics as rows, models as columns, followed by the train/test gaps."""
    metrics = [
        ("RMSE-train (mm)", "rmse_train_mm"),
        ("RMSE-test (mm)", "rmse_test_mm"),
        ("MAE-train (mm)", "mae_train_mm"),
        ("MAE-test (mm)", "mae_test_mm"),
        ("Training time (s)", "train_time_s"),
    ]
    label_width = max(len(label) for label, _ in metrics + [("MAE reduction (%)", "")])
    col_width = max(12, *(len(row.model) + 2 for row in rows))

    lines = [" " * label_width + "".join(row.model.rjust(col_width) for row in rows)]
    for label, attr in metrics:
        lines.append(label.ljust(label_width) + "".join(f"{getattr(row, attr):{col_width}.3f}" for row in rows))
    if any(row.mae_reduction_pct is not None for row in rows):
        cells = (
            "-".rjust(col_width) if row.mae_reduction_pct is None else f"{row.mae_reduction_pct:{col_width}.1f}"
            for row in rows
        )
        lines.append("MAE reduction (%)".ljust(label_width) + "".join(cells))
    lines.append("")
    for row in rows:
        lines.append(
            f"{row.model}: RMSE test-train gap {row.rmse_test_mm - row.rmse_train_mm:.3f} mm, "
            f"MAE test-train gap {row.mae_test_mm - row.mae_train_mm:.3f} mm"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Correction targets
# ---------------------------------------------------------------------------

TARGET_TEST_MAE_MM = 4.0
TARGET_MAE_REDUCTION_PCT = 60.0
TARGET_SCENE_MAE_RATIO = 0.5


class AcceptanceCheck(BaseModel):
    name: str
    achieved: float
    comparison: Literal["<=", ">="]
    target: float

    @computed_field
    @property
    def passed(self) -> bool:
        if not math.isfinite(self.achieved):
            return False
        return self.achieved <= self.target if self.comparison == "<=" else self.achieved >= self.target


def acceptance_checks(row: ReportRow, scene_mae_ratio: Optional[float] = None) -> List[AcceptanceCheck]:
    """The booster row (and the scene, when rendered with a model) against the correction targets."""
    checks = [
        AcceptanceCheck(name="test MAE (mm)", achieved=row.mae_test_mm, comparison="<=", target=TARGET_TEST_MAE_MM)
    ]
    if row.mae_reduction_pct is not None:
        checks.append(
            AcceptanceCheck(
                name="test MAE reduction vs raw (%)",
                achieved=row.mae_reduction_pct,
                comparison=">=",
                target=TARGET_MAE_REDUCTION_PCT,
            )
        )
    if scene_mae_ratio is not None:
        checks.append(
            AcceptanceCheck(
                name="scene corrected / raw MAE",
                achieved=scene_mae_ratio,
                comparison="<=",
                target=TARGET_SCENE_MAE_RATIO,
            )
        )
    return checks


def format_acceptance_text(model: str, checks: Sequence[AcceptanceCheck]) -> str:
    lines = [f"{model} against the correction targets:"]
    for check in checks:
        verdict = "met" if check.passed else "SHORTFALL"
        lines.append(f"  {check.name}: {check.achieved:.3f} (target {check.comparison} {check.target:g}) {verdict}")
    return "\n".join(lines) + "\n"
