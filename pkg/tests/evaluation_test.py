import json

import numpy as np
import pandas as pd
import pytest

from sure_lab.errors import ConfigError, ContractError, DomainError, ShapeError
from sure_lab.evaluation import (
    ScenarioResult,
    aggregate_deferral,
    build_report,
    calibrate,
    calibration_stats,
    deferral_analysis,
    deferral_from_records,
    pooled_metrics,
    records_frame,
    task_metrics,
    uce,
    uncertainty_corr,
    write_deferral_csv,
    write_metrics_json,
)
from sure_lab.losses import pearson
from sure_lab.propagation import UncertaintyRecord


def assert_close(actual, expected, tol=1e-12, what="value"):
    assert actual == pytest.approx(expected, abs=tol), f"{what}: expected {expected}, got {actual}"


def test_perfect_predictions():
    y = np.array([[0.1], [0.5], [0.9]])
    reg = task_metrics("regression", y, y)
    assert_close(reg["mae"], 0.0, what="mae")
    assert_close(reg["corr"], 1.0, what="corr")
    labels = np.eye(3)[[0, 1, 2, 1]]
    cls = task_metrics("classification", labels * 5.0, labels)
    assert cls == {"acc": 1.0, "f1": 1.0}


def test_shifted_regression():
    y = np.array([[0.0], [1.0], [3.0]])
    m = task_metrics("regression", y + 0.4, y)
    assert_close(m["mae"], 0.4, what="mae")
    assert_close(m["corr"], 1.0, what="corr")


def test_two_class_confusion_example():
    labels = np.eye(2)[[0, 0, 1, 1]]
    preds = np.eye(2)[[0, 1, 1, 1]]
    m = task_metrics("classification", preds, labels)
    assert_close(m["acc"], 0.75, what="acc")
    assert_close(m["f1"], (2 / 3 + 4 / 5) / 2, what="f1")


def test_absent_class_scores_zero_f1():
    labels = np.eye(3)[[0, 0, 1]]
    preds = np.eye(3)[[0, 0, 1]]
    assert_close(task_metrics("classification", preds, labels)["f1"], 2 / 3, what="f1")


def test_metric_length_mismatch():
    with pytest.raises(ShapeError):
        task_metrics("regression", np.zeros((2, 1)), np.zeros((3, 1)))


def test_uncertainty_corr_examples():
    e = np.random.default_rng(0).uniform(size=100)
    assert_close(uncertainty_corr(e, e), 1.0)
    assert_close(uncertainty_corr(3.0 - e, e), -1.0)
    rng = np.random.default_rng(1)
    assert abs(uncertainty_corr(rng.uniform(size=10_000), rng.uniform(size=10_000))) < 0.05
    assert uncertainty_corr(np.ones(5), e[:5]) is None


def test_calibrate_identity_ordering_and_clip():
    stats = {"error_mean": 0.0, "error_std": 1.0, "uncertainty_mean": 0.0, "uncertainty_std": 1.0}
    x = np.array([0.2, 1.5, 0.7])
    np.testing.assert_array_equal(calibrate(x, stats), x)

    rng = np.random.default_rng(2)
    sigma2 = rng.uniform(0.0, 2.0, 50)
    stats = calibration_stats(rng.uniform(0.5, 1.0, 50), rng.uniform(0.0, 3.0, 50))
    out = calibrate(sigma2, stats)
    assert np.all(out >= 0.0)
    kept = out > 0
    np.testing.assert_array_equal(np.argsort(out[kept]), np.argsort(sigma2[kept]))

    shifted = calibrate(sigma2, {**stats, "error_mean": 100.0})
    err = rng.uniform(size=50)
    assert_close(pearson(shifted, err).value, pearson(sigma2, err).value)

    with pytest.raises(DomainError):
        calibrate(sigma2, {**stats, "uncertainty_std": 0.0})


def test_uce_examples():
    err = np.random.default_rng(3).uniform(size=200)
    assert_close(uce(err, err), 0.0)
    assert_close(uce(err + 0.3, err), 0.3)
    assert uce(np.random.default_rng(4).uniform(size=200), err) >= 0.0
    with pytest.raises(ShapeError):
        uce(np.ones(5), np.ones(5))


def test_oracle_deferral():
    correct = np.array([True, True, False, True, False, True, True, False, True, True])
    sigma2 = (~correct).astype(float)
    for row in deferral_analysis(sigma2, correct, [0.5, 0.65]):
        assert row["tdr_recall"] == 1.0
        assert row["fdr_recall"] == 0.0
        assert row["retained_acc"] == 1.0
        assert row["tdr_precision"] + row["fdr_precision"] == 1.0


def test_random_deferral():
    rng = np.random.default_rng(0)
    sigma2 = rng.uniform(size=10_000)
    correct = rng.uniform(size=10_000) < 0.7
    row = deferral_analysis(sigma2, correct, [0.65])[0]
    assert abs(row["deferred_frac"] - 0.35) < 0.02
    assert abs(row["tdr_recall"] - row["fdr_recall"]) < 0.05


def test_constant_uncertainty_defers_nothing():
    correct = np.array([True, False, True, True])
    for row in deferral_analysis(np.full(4, 0.3), correct, [0.1, 0.5, 0.9]):
        assert row["deferred_frac"] == 0.0
        assert row["tdr_precision"] is None and row["fdr_precision"] is None
        assert row["retained_acc"] == 0.75


def test_deferred_fraction_non_increasing():
    rng = np.random.default_rng(5)
    rows = deferral_analysis(rng.normal(size=300), rng.uniform(size=300) < 0.5, [0.1, 0.3, 0.5, 0.7, 0.9])
    fracs = [r["deferred_frac"] for r in rows]
    assert fracs == sorted(fracs, reverse=True)


def test_deferral_validates_inputs():
    with pytest.raises(DomainError):
        deferral_analysis(np.ones(3), np.ones(3, dtype=bool), [1.0])
    with pytest.raises(ShapeError):
        deferral_analysis(np.ones(3), np.ones(2, dtype=bool), [0.5])


def make_result(name, missing, seed, with_uncertainty=True):
    rng = np.random.default_rng(seed)
    n = 30
    labels = np.eye(3)[rng.integers(3, size=n)]
    predictions = rng.normal(size=(n, 3))
    error = rng.uniform(size=n)
    if with_uncertainty:
        sigma2_input = rng.uniform(size=n) if missing else np.zeros(n)
        omega = rng.uniform(0.1, 1.0, n)
        record = UncertaintyRecord(
            error=error,
            sigma2_input=sigma2_input,
            sigma2_omega=omega,
            sigma2_total=sigma2_input + omega,
            rec_var={i: rng.uniform(size=n) for i in missing},
            rec_error={i: rng.uniform(size=n) for i in missing},
        )
    else:
        record = UncertaintyRecord(error=error)
    return ScenarioResult(name, missing, "classification", predictions, labels, record)


def test_report_and_outputs(tmp_path):
    results = [make_result("missing=none", (), 0), make_result("missing=1", (1,), 1)]
    calibration = calibration_stats(np.random.default_rng(9).uniform(size=20), np.random.default_rng(8).uniform(size=20))
    report = build_report(results, calibration, [0.5, 0.65])
    assert set(report.scenarios) == {"missing=none", "missing=1"}
    one = report.scenarios["missing=1"]
    assert set(one["reconstruction_uncertainty_corr"]) == {"1"}
    assert one["uce"] is not None and one["uce"] >= 0.0
    assert len(one["deferral"]) == 2
    assert report.scenarios["missing=none"]["rec_output_corr"] is None
    assert set(report.aggregate_deferral) == {"missing=none", "missing=1"}
    assert report.aggregate_deferral["missing=1"]["quantile"] == 0.65

    write_metrics_json(tmp_path / "metrics.json", report)
    loaded = json.loads((tmp_path / "metrics.json").read_text())
    assert loaded["task"] == "classification"

    write_deferral_csv(tmp_path / "deferral.csv", {n: m["deferral"] for n, m in report.scenarios.items()})
    frame = pd.read_csv(tmp_path / "deferral.csv")
    assert list(frame.columns) == [
        "scenario",
        "quantile",
        "threshold",
        "deferred_frac",
        "retained_acc",
        "tdr_recall",
        "fdr_recall",
        "tdr_precision",
        "fdr_precision",
    ]
    assert len(frame) == 4


def test_report_without_uncertainty():
    report = build_report([make_result("missing=0", (0,), 2, with_uncertainty=False)], None, [0.5])
    metrics = report.scenarios["missing=0"]
    assert metrics["output_uncertainty_corr"] is None
    assert metrics["uce"] is None and metrics["deferral"] is None
    assert report.aggregate_deferral == {}


def test_deferral_from_records_matches_direct_analysis():
    results = [make_result("missing=none", (), 0), make_result("missing=1", (1,), 1)]
    frame = records_frame(results)
    assert len(frame) == 60
    assert {"rec_var_1", "rec_error_1", "sigma2_total", "correct"} <= set(frame.columns)

    curves = deferral_from_records(frame, [0.5])
    direct = deferral_analysis(results[1].record.sigma2_total, results[1].correct, [0.5])
    assert curves["missing=1"] == direct

    only = deferral_from_records(frame, [0.5], scenario="missing=none")
    assert list(only) == ["missing=none"]
    with pytest.raises(ConfigError):
        deferral_from_records(frame, [0.5], scenario="missing=0")


def test_deferral_from_records_needs_uncertainty():
    frame = records_frame([make_result("missing=0", (0,), 2, with_uncertainty=False)])
    with pytest.raises(ContractError):
        deferral_from_records(frame, [0.5])
    with pytest.raises(ContractError):
        deferral_from_records(frame.drop(columns=["correct"]), [0.5])


def test_aggregate_deferral_skips_point_estimates():
    assert aggregate_deferral([make_result("missing=0", (0,), 2, with_uncertainty=False)]) == {}


def test_pooled_metrics_span_scenarios():
    rng = np.random.default_rng(4)
    n = 40

    def level(base):
        return base + rng.uniform(-0.1, 0.1, n)

    results = []
    for name, missing, base in [("missing=0", (0,), 1.0), ("missing=1", (1,), 3.0), ("missing=0,1", (0, 1), 2.0)]:
        omega = level(base)
        record = UncertaintyRecord(
            error=level(base),
            sigma2_input=np.zeros(n),
            sigma2_omega=omega,
            sigma2_total=np.zeros(n) + omega,
            rec_var={i: level(base) for i in missing},
            rec_error={i: level(base) for i in missing},
        )
        labels = np.eye(3)[rng.integers(3, size=n)]
        results.append(ScenarioResult(name, missing, "classification", rng.normal(size=(n, 3)), labels, record))
    results.append(make_result("missing=none", (), 5))

    pooled = pooled_metrics(results)
    assert pooled["n_rows"] == 3 * n
    assert set(pooled["reconstruction_uncertainty_corr_by_modality"]) == {"0", "1"}
    # the shared level dominates the within-scenario noise
    assert pooled["reconstruction_uncertainty_corr"] > 0.9
    assert pooled["output_uncertainty_corr"] > 0.9

    partial = results[:3]
    expected = pearson(
        np.concatenate([r.record.sigma2_total for r in partial]), np.concatenate([r.record.error for r in partial])
    ).value
    assert_close(pooled["output_uncertainty_corr"], expected)
    zero = pearson(
        np.concatenate([results[0].record.rec_var[0], results[2].record.rec_var[0]]),
        np.concatenate([results[0].record.rec_error[0], results[2].record.rec_error[0]]),
    ).value
    assert_close(pooled["reconstruction_uncertainty_corr_by_modality"]["0"], zero)

    report = build_report(results, None, [0.5])
    assert report.pooled == pooled
    assert report.to_dict()["pooled"]["n_rows"] == 3 * n


def test_pooled_metrics_without_missing_scenarios():
    pooled = pooled_metrics([make_result("missing=none", (), 0)])
    assert pooled["reconstruction_uncertainty_corr"] is None
    assert pooled["output_uncertainty_corr"] is None
    assert pooled["reconstruction_uncertainty_corr_by_modality"] == {}
    assert pooled["n_rows"] == 0
