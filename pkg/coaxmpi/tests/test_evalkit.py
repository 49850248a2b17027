import math

import numpy as np
import pytest
from scipy.special import ndtr
from scipy.stats import chi2

from coaxmpi.app.errors import DomainError
from coaxmpi.app.services.evalkit import (
    KnnModel,
    ReportRow,
    acceptance_checks,
    comparison_report,
    error_stats,
    format_acceptance_text,
    format_report_text,
    histogram,
    knn_fit,
    knn_predict,
    raw_depth_predictor,
    write_histogram_csv,
    write_report_csv,
)


def zscore_knn_oracle(x_train, y_train, queries, k):
    mean, std = x_train.mean(axis=0), x_train.std(axis=0)
    zt, zq = (x_train - mean) / std, (queries - mean) / std
    out = []
    for q in zq:
        dist = np.sqrt(((zt - q) ** 2).sum(axis=1))
        nearest = np.argsort(dist, kind="stable")[:k]
        out.append(y_train[nearest].mean())
    return np.array(out)


def test_error_stats_example():
    stats = error_stats([1.001, 0.998], [1.0, 1.0])
    assert stats.mae == pytest.approx(1.5)
    assert stats.rmse == pytest.approx(math.sqrt(2.5))
    assert stats.bias == pytest.approx(-0.5)
    assert stats.max_abs == pytest.approx(2.0)
    assert stats.n == 2
    assert set(stats.to_dict()) == {"mae", "rmse", "bias", "max_abs", "n"}


def test_error_stats_rmse_never_below_mae():
    rng = np.random.default_rng(0)
    for _ in range(100):
        truth = rng.uniform(1.4, 2.4, size=int(rng.integers(1, 30)))
        stats = error_stats(truth + rng.choice([-0.003, 0.003], size=truth.size), truth)
        assert stats.rmse >= stats.mae


def test_error_stats_rejects_bad_input():
    with pytest.raises(DomainError):
        error_stats([1.0, 2.0], [1.0])
    with pytest.raises(DomainError):
        error_stats([], [])


def test_histogram_single_value():
    hist = histogram([1.2], 0.5)
    assert hist.edges.tolist() == [1.0, 1.5]
    assert hist.counts.tolist() == [1]


def test_histogram_symmetric_errors():
    hist = histogram([-1.5, -0.5, 0.5, 1.5], 1.0)
    assert hist.edges.tolist() == [-2.0, -1.0, 0.0, 1.0, 2.0]
    assert hist.counts.tolist() == [1, 1, 1, 1]
    assert hist.rows()[0] == (-2.0, -1.0, 1)


def test_histogram_counts_every_error_once():
    errors = np.random.default_rng(1).normal(0.0, 7.0, size=5000)
    hist = histogram(errors, 0.5)
    assert hist.counts.sum() == 5000
    assert hist.edges[0] <= errors.min() and hist.edges[-1] >= errors.max()
    assert np.allclose(np.diff(hist.edges), 0.5)


def test_histogram_of_gaussian_errors_passes_chi_square():
    sigma, n = 5.0, 10_000
    hist = histogram(np.random.default_rng(2).normal(0.0, sigma, size=n), 1.0)
    expected = n * (ndtr(hist.edges[1:] / sigma) - ndtr(hist.edges[:-1] / sigma))
    keep = expected >= 5.0
    stat = np.sum((hist.counts[keep] - expected[keep]) ** 2 / expected[keep])
    assert chi2.sf(stat, keep.sum() - 1) > 1e-3


def test_histogram_rejects_bad_input():
    with pytest.raises(DomainError):
        histogram([1.0], 0.0)
    with pytest.raises(DomainError):
        histogram([], 1.0)
    with pytest.raises(DomainError):
        histogram([np.nan], 1.0)


def test_histogram_csv(tmp_path):
    path = write_histogram_csv(histogram([1.2], 0.5), tmp_path / "hist.csv")
    assert path.read_text() == "bin_left_mm,bin_right_mm,count\n1.0,1.5,1\n"


def test_knn_matches_zscore_oracle():
    rng = np.random.default_rng(3)
    x_train = rng.normal(size=(60, 3)) * np.array([1.0, 100.0, 0.01])
    y_train = rng.normal(size=60)
    queries = rng.normal(size=(15, 3)) * np.array([1.0, 100.0, 0.01])
    for k in (1, 4, 60):
        model = knn_fit(x_train, y_train, k)
        expected = zscore_knn_oracle(x_train, y_train, queries, k)
        assert knn_predict(model, queries) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_knn_breaks_distance_ties_by_training_index():
    x_train = np.array([[0.0], [1.0], [1.0], [2.0]])
    y_train = np.array([0.0, 10.0, 20.0, 30.0])
    model = knn_fit(x_train, y_train, 1)
    assert model.predict(np.array([1.0])) == 10.0
    assert knn_fit(x_train, y_train, 2).predict(np.array([1.0])) == 15.0


def test_knn_is_invariant_to_feature_scale():
    rng = np.random.default_rng(4)
    x_train, y_train = rng.uniform(size=(40, 2)), rng.uniform(size=40)
    queries = rng.uniform(size=(10, 2))
    scale = np.array([1000.0, 0.001])
    plain = knn_fit(x_train, y_train, 3).predict(queries)
    scaled = knn_fit(x_train * scale, y_train, 3).predict(queries * scale)
    assert scaled == pytest.approx(plain, rel=1e-9)


def test_knn_rejects_bad_configuration():
    with pytest.raises(DomainError):
        KnnModel(k=0)
    with pytest.raises(DomainError):
        knn_fit(np.zeros((3, 2)), np.zeros(3), k=4)
    with pytest.raises(ValueError):
        KnnModel(k=1).predict(np.zeros((1, 2)))


def _report_fixture():
    rng = np.random.default_rng(5)
    y = rng.uniform(1.4, 2.4, size=80)
    x = np.column_stack([y + 0.01 * rng.normal(size=80) for _ in range(4)] + [rng.uniform(size=80) for _ in range(4)])
    return x[:60], y[:60], x[60:], y[60:]


def test_comparison_report_rows():
    x_train, y_train, x_test, y_test = _report_fixture()
    raw_mae = error_stats(raw_depth_predictor(x_test), y_test).mae
    trainers = {
        "raw": lambda x, y: raw_depth_predictor,
        "knn": lambda x, y: knn_fit(x, y, 3).predict,
    }
    rows = comparison_report(trainers, x_train, y_train, x_test, y_test, raw_test_mae_mm=raw_mae)

    assert [row.model for row in rows] == ["raw", "knn"]
    assert rows[0].mae_test_mm == pytest.approx(raw_mae)
    assert rows[0].mae_reduction_pct == pytest.approx(0.0, abs=1e-9)
    for row in rows:
        assert row.rmse_test_mm >= row.mae_test_mm
        assert row.train_time_s >= 0.0


def test_comparison_report_without_raw_baseline():
    x_train, y_train, x_test, y_test = _report_fixture()
    rows = comparison_report({"raw": lambda x, y: raw_depth_predictor}, x_train, y_train, x_test, y_test)
    assert rows[0].mae_reduction_pct is None


def test_comparison_report_needs_a_model():
    x_train, y_train, x_test, y_test = _report_fixture()
    with pytest.raises(DomainError):
        comparison_report({}, x_train, y_train, x_test, y_test)


def test_report_csv_and_text(tmp_path):
    x_train, y_train, x_test, y_test = _report_fixture()
    rows = comparison_report(
        {"raw": lambda x, y: raw_depth_predictor, "knn": lambda x, y: knn_fit(x, y, 3).predict},
        x_train, y_train, x_test, y_test, raw_test_mae_mm=10.0,
    )
    lines = write_report_csv(rows, tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "model,rmse_train_mm,rmse_test_mm,mae_train_mm,mae_test_mm,train_time_s,mae_reduction_pct"
    assert [line.split(",")[0] for line in lines[1:]] == ["raw", "knn"]

    text = format_report_text(rows)
    assert "MAE-test (mm)" in text
    assert "MAE reduction (%)" in text
    assert "knn: RMSE test-train gap" in text


def test_acceptance_checks_mark_shortfalls():
    row = ReportRow(
        model="gbtree", rmse_train_mm=3.0, rmse_test_mm=4.0, mae_train_mm=2.5, mae_test_mm=3.5, train_time_s=1.0,
        mae_reduction_pct=40.0,
    )
    checks = acceptance_checks(row, scene_mae_ratio=0.3)
    assert [c.name for c in checks] == [
        "test MAE (mm)", "test MAE reduction vs raw (%)", "scene corrected / raw MAE"
    ]
    assert [c.passed for c in checks] == [True, False, True]

    text = format_acceptance_text("gbtree", checks)
    assert text.splitlines()[0] == "gbtree against the correction targets:"
    assert "test MAE reduction vs raw (%): 40.000 (target >= 60) SHORTFALL" in text
    assert text.count(" met") == 2


def test_acceptance_checks_without_reduction_or_scene():
    row = ReportRow(
        model="gbtree", rmse_train_mm=1.0, rmse_test_mm=math.nan, mae_train_mm=1.0, mae_test_mm=math.nan,
        train_time_s=1.0,
    )
    checks = acceptance_checks(row)
    assert len(checks) == 1
    assert not checks[0].passed
