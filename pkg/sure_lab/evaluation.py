import json
import logging
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import special
from sklearn.metrics import accuracy_score, f1_score, mean_absolute_error

from .errors import ConfigError, ContractError, DomainError, ShapeError
from .losses import pearson
from .propagation import UncertaintyRecord

logger = logging.getLogger(__name__)


class DeferralRow(typing.TypedDict):
    quantile: float
    threshold: float
    deferred_frac: float
    retained_acc: float | None
    tdr_recall: float | None
    fdr_recall: float | None
    tdr_precision: float | None
    fdr_precision: float | None


class CalibrationStats(typing.TypedDict):
    error_mean: float
    error_std: float
    uncertainty_mean: float
    uncertainty_std: float


class PooledMetrics(typing.TypedDict):
    reconstruction_uncertainty_corr: float | None
    reconstruction_uncertainty_corr_by_modality: dict[str, float | None]
    output_uncertainty_corr: float | None
    n_rows: int


@dataclass
class ScenarioResult:
    name: str
    missing: tuple[int, ...]
    task: str
    predictions: np.ndarray
    labels: np.ndarray
    record: UncertaintyRecord

    @property
    def correct(self) -> np.ndarray:
        return np.argmax(self.predictions, axis=1) == np.argmax(self.labels, axis=1)


@dataclass
class MetricsReport:
    task: str
    scenarios: dict[str, dict] = field(default_factory=dict)
    aggregate_deferral: dict[str, DeferralRow] = field(default_factory=dict)
    pooled: PooledMetrics | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _class_indices(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.argmax(x, axis=1) if x.ndim == 2 else x.astype(int)


def task_metrics(task: str, predictions: np.ndarray, labels: np.ndarray, n_classes: int | None = None) -> dict[str, float]:
    """Regression: MAE and Corr. Classification: Acc and unweighted macro-F1 (an empty class scores 0)."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape[0] != labels.shape[0]:
        raise ShapeError(f"task_metrics: {predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    if task == "regression":
        y_hat, y = predictions.reshape(-1), labels.reshape(-1)
        return {"mae": float(mean_absolute_error(y, y_hat)), "corr": pearson(y_hat, y).value}
    y_hat, y = _class_indices(predictions), _class_indices(labels)
    if n_classes is None:
        n_classes = labels.shape[1] if labels.ndim == 2 else int(max(y.max(), y_hat.max())) + 1
    f1 = f1_score(y, y_hat, labels=list(range(n_classes)), average="macro", zero_division=0)
    return {"acc": float(accuracy_score(y, y_hat)), "f1": float(f1)}


def uncertainty_corr(sigma2: np.ndarray, err2: np.ndarray) -> float | None:
    r = pearson(sigma2, err2)
    if r.degenerate:
        logger.warning("Uncertainty correlation is degenerate (zero spread)")
        return None
    return r.value


def calibration_stats(sigma2: np.ndarray, err2: np.ndarray) -> CalibrationStats:
    return CalibrationStats(
        error_mean=float(np.mean(err2)),
        error_std=float(np.std(err2, ddof=1)),
        uncertainty_mean=float(np.mean(sigma2)),
        uncertainty_std=float(np.std(sigma2, ddof=1)),
    )


def calibrate(sigma2: np.ndarray, stats: CalibrationStats) -> np.ndarray:
    """Affine map of test uncertainties onto the training error scale, clipped at 0."""
    if not stats["uncertainty_std"] > 0:
        raise DomainError("calibrate: training uncertainty has zero spread")
    z = (np.asarray(sigma2, dtype=np.float64) - stats["uncertainty_mean"]) / stats["uncertainty_std"]
    return np.maximum(stats["error_mean"] + stats["error_std"] * z, 0.0)


def uce(sigma_hat: np.ndarray, err: np.ndarray, bins: int = 10) -> float:
    """Σ_b (n_b/N)·|mean error_b − mean σ̂²_b| over equal-width bins of σ̂²; empty bins skipped."""
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64).reshape(-1)
    err = np.asarray(err, dtype=np.float64).reshape(-1)
    n = sigma_hat.size
    if n < bins:
        raise ShapeError(f"uce: need at least {bins} samples, got {n}")
    if err.size != n:
        raise ShapeError(f"uce: {n} uncertainties vs {err.size} errors")
    lo, hi = float(sigma_hat.min()), float(sigma_hat.max())
    if hi == lo:
        idx = np.zeros(n, dtype=int)
    else:
        idx = np.minimum(((sigma_hat - lo) / (hi - lo) * bins).astype(int), bins - 1)
    total = 0.0
    for b in range(bins):
        in_bin = idx == b
        count = int(in_bin.sum())
        if count:
            total += count / n * abs(float(err[in_bin].mean()) - float(sigma_hat[in_bin].mean()))
    return total


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def deferral_row(sigma2: np.ndarray, correct: np.ndarray, quantile: float) -> DeferralRow:
    threshold = float(np.quantile(sigma2, quantile))
    deferred = sigma2 > threshold
    incorrect = ~correct
    n_deferred = int(deferred.sum())
    true_deferred = int((deferred & incorrect).sum())
    tdr_precision = _ratio(true_deferred, n_deferred)
    return DeferralRow(
        quantile=float(quantile),
        threshold=threshold,
        deferred_frac=n_deferred / sigma2.size,
        retained_acc=float(correct[~deferred].mean()) if n_deferred < sigma2.size else None,
        tdr_recall=_ratio(true_deferred, int(incorrect.sum())),
        fdr_recall=_ratio(int((deferred & correct).sum()), int(correct.sum())),
        tdr_precision=tdr_precision,
        fdr_precision=None if tdr_precision is None else 1.0 - tdr_precision,
    )


def deferral_analysis(sigma2: np.ndarray, correct: np.ndarray, quantiles: typing.Iterable[float]) -> list[DeferralRow]:
    """Defer every prediction whose uncertainty exceeds the q-quantile threshold."""
    sigma2 = np.asarray(sigma2, dtype=np.float64).reshape(-1)
    correct = np.asarray(correct, dtype=bool).reshape(-1)
    if sigma2.size != correct.size:
        raise ShapeError(f"deferral: {sigma2.size} uncertainties vs {correct.size} outcomes")
    rows = []
    for q in quantiles:
        if not 0.0 < q < 1.0:
            raise DomainError(f"deferral quantile must be in (0, 1), got {q}")
        rows.append(deferral_row(sigma2, correct, q))
    return rows


def aggregate_deferral(results: typing.Iterable[ScenarioResult], quantile: float = 0.65) -> dict[str, DeferralRow]:
    """One deferral row per missing-modality scenario at a fixed quantile."""
    out = {}
    for res in results:
        if res.task == "classification" and res.record.sigma2_total is not None:
            out[res.name] = deferral_analysis(res.record.sigma2_total, res.correct, [quantile])[0]
    return out


def scenario_metrics(
    result: ScenarioResult,
    calibration: CalibrationStats | None,
    quantiles: typing.Sequence[float],
) -> dict:
    record = result.record
    metrics: dict[str, typing.Any] = {
        "missing": list(result.missing),
        "n": int(result.labels.shape[0]),
        **task_metrics(result.task, result.predictions, result.labels),
    }
    metrics["reconstruction_uncertainty_corr"] = {
        str(i): uncertainty_corr(record.rec_var[i], record.rec_error[i]) for i in sorted(record.rec_var)
    }
    total = record.sigma2_total
    if total is None:
        metrics.update(output_uncertainty_corr=None, uce=None, rec_output_corr=None, deferral=None)
        return metrics
    metrics["output_uncertainty_corr"] = uncertainty_corr(total, record.error)
    if record.rec_var:
        mean_rec = np.mean([record.rec_var[i] for i in sorted(record.rec_var)], axis=0)
        metrics["rec_output_corr"] = uncertainty_corr(mean_rec, total)
    else:
        metrics["rec_output_corr"] = None
    if calibration is not None and calibration["uncertainty_std"] > 0:
        metrics["uce"] = uce(calibrate(total, calibration), record.error)
    else:
        metrics["uce"] = None
    metrics["deferral"] = deferral_analysis(total, result.correct, quantiles) if result.task == "classification" else None
    return metrics


def pooled_metrics(results: typing.Sequence[ScenarioResult]) -> PooledMetrics:
    """Uncertainty correlations over the rows of every scenario with a missing modality, taken together."""
    partial = [res for res in results if res.missing]
    by_modality: dict[int, tuple[list[np.ndarray], list[np.ndarray]]] = {}
    for res in partial:
        for i in sorted(res.record.rec_var):
            var, err = by_modality.setdefault(i, ([], []))
            var.append(res.record.rec_var[i])
            err.append(res.record.rec_error[i])

    def corr(var: list[np.ndarray], err: list[np.ndarray]) -> float | None:
        return uncertainty_corr(np.concatenate(var), np.concatenate(err)) if var else None

    rec_var = [v for i in sorted(by_modality) for v in by_modality[i][0]]
    rec_err = [e for i in sorted(by_modality) for e in by_modality[i][1]]
    with_total = [res for res in partial if res.record.sigma2_total is not None]
    return PooledMetrics(
        reconstruction_uncertainty_corr=corr(rec_var, rec_err),
        reconstruction_uncertainty_corr_by_modality={str(i): corr(*by_modality[i]) for i in sorted(by_modality)},
        output_uncertainty_corr=corr(
            [typing.cast(np.ndarray, res.record.sigma2_total) for res in with_total], [res.record.error for res in with_total]
        ),
        n_rows=int(sum(res.labels.shape[0] for res in partial)),
    )


def build_report(
    results: typing.Sequence[ScenarioResult],
    calibration: CalibrationStats | None,
    quantiles: typing.Sequence[float],
) -> MetricsReport:
    task = results[0].task if results else "classification"
    report = MetricsReport(task=task)
    for res in results:
        report.scenarios[res.name] = scenario_metrics(res, calibration, quantiles)
    report.aggregate_deferral = aggregate_deferral(results)
    report.pooled = pooled_metrics(results)
    return report


def write_metrics_json(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def write_deferral_csv(path: str | Path, rows_by_scenario: dict[str, list[DeferralRow]], float_format: str = "%.17g") -> None:
    frame = pd.DataFrame(
        [{"scenario": name, **row} for name, rows in rows_by_scenario.items() for row in rows],
        columns=["scenario", *DeferralRow.__annotations__],
    )
    frame.to_csv(path, index=False, float_format=float_format)


def records_frame(results: typing.Sequence[ScenarioResult]) -> pd.DataFrame:
    frames = []
    for res in results:
        rec = res.record
        n = res.labels.shape[0]
        data: dict[str, typing.Any] = {"scenario": [res.name] * n, "sample": np.arange(n)}
        if res.task == "classification":
            data["label"] = np.argmax(res.labels, axis=1)
            data["prediction"] = np.argmax(res.predictions, axis=1)
            data["correct"] = res.correct.astype(int)
            data["confidence"] = np.max(special.softmax(res.predictions, axis=1), axis=1)
        else:
            data["label"] = res.labels[:, 0]
            data["prediction"] = res.predictions[:, 0]
        data["error"] = rec.error
        for key in ("sigma2_input", "sigma2_omega", "sigma2_total"):
            value = getattr(rec, key)
            data[key] = value if value is not None else [None] * n
        for i in sorted(set(rec.rec_var) | set(rec.rec_error)):
            data[f"rec_var_{i}"] = rec.rec_var[i] if i in rec.rec_var else [None] * n
            data[f"rec_error_{i}"] = rec.rec_error[i] if i in rec.rec_error else [None] * n
        frames.append(pd.DataFrame(data))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def deferral_from_records(
    frame: pd.DataFrame, quantiles: typing.Sequence[float], scenario: str | None = None
) -> dict[str, list[DeferralRow]]:
    """Deferral curves per scenario read back from a records table."""
    if "correct" not in frame.columns:
        raise ContractError("deferral needs a classification run")
    if scenario is not None:
        frame = frame[frame["scenario"] == scenario]
        if frame.empty:
            raise ConfigError(f"no records for scenario {scenario}")
    out = {}
    for name, group in frame.groupby("scenario", sort=False):
        sigma2 = pd.to_numeric(group["sigma2_total"], errors="coerce").to_numpy(dtype=np.float64)
        if np.isnan(sigma2).any():
            raise ContractError(f"scenario {name} has no output uncertainty to defer on")
        out[str(name)] = deferral_analysis(sigma2, group["correct"].to_numpy().astype(bool), quantiles)
    return out
