"""Correlation and likelihood losses for uncertainty heads, plus their closed-form gradients.

Differentiable losses take tensors from a `Graph`; the statistics used by
evaluation and the self-checks work on plain arrays.
"""

import logging
import typing

import numpy as np
from scipy import special

from .errors import DomainError, ShapeError
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)


class PearsonResult(typing.NamedTuple):
    value: float
    degenerate: bool


class LossValue(typing.NamedTuple):
    loss: Tensor
    degenerate: bool


class MseIdentityCheck(typing.TypedDict):
    n: int
    r: float
    lhs: float
    rhs: float
    gap: float


def _as_vector(x: typing.Any, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ShapeError(f"{name}: need at least 2 samples, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name}: non-finite values")
    return v


def _has_spread(centered: np.ndarray, original: np.ndarray) -> bool:
    tol = 1e-12 * max(1.0, float(np.max(np.abs(original)))) * np.sqrt(original.size)
    return float(np.linalg.norm(centered)) > tol


def pearson(a: typing.Any, b: typing.Any) -> PearsonResult:
    a = _as_vector(a, "pearson")
    b = _as_vector(b, "pearson")
    if a.shape != b.shape:
        raise ShapeError(f"pearson: length mismatch {a.shape} vs {b.shape}")
    ca = a - a.mean()
    cb = b - b.mean()
    if not (_has_spread(ca, a) and _has_spread(cb, b)):
        return PearsonResult(0.0, True)
    r = float(np.dot(ca, cb) / (np.linalg.norm(ca) * np.linalg.norm(cb)))
    return PearsonResult(float(np.clip(r, -1.0, 1.0)), False)


def standardize(x: typing.Any) -> np.ndarray:
    """Zero mean, unit sample variance (N-1 denominator)."""
    x = _as_vector(x, "standardize")
    centered = x - x.mean()
    if not _has_spread(centered, x):
        raise DomainError("standardize: zero spread")
    return centered / np.std(x, ddof=1)


def pcc_loss(graph: Graph, sigma2: Tensor, err2: typing.Any) -> LossValue:
    """1 - r(sigma2, err2). Errors are targets: no gradient flows into them."""
    e = err2.value if isinstance(err2, Tensor) else np.asarray(err2, dtype=np.float64)
    if sigma2.value.ndim != 1 or e.shape != sigma2.shape:
        raise ShapeError(f"pcc_loss: expected matching vectors, got {sigma2.shape} and {e.shape}")
    s = _as_vector(sigma2.value, "pcc_loss")
    e = _as_vector(e, "pcc_loss")
    ce = e - e.mean()
    if not (_has_spread(s - s.mean(), s) and _has_spread(ce, e)):
        return LossValue(graph.constant(1.0), True)
    n = s.size
    centered = graph.sub(sigma2, graph.broadcast_row(graph.mean(sigma2), n))
    cov = graph.sum(graph.mul(centered, graph.constant(ce)))
    norm = graph.scale(graph.sqrt(graph.sum(graph.square(centered))), float(np.linalg.norm(ce)))
    r = graph.div(cov, norm)
    return LossValue(graph.sub(graph.constant(1.0), r), False)


def pcc_value(sigma2: typing.Any, err2: typing.Any) -> PearsonResult:
    r = pearson(sigma2, err2)
    return PearsonResult(1.0 if r.degenerate else 1.0 - r.value, r.degenerate)


def pcc_grad_sigma(sigma2: typing.Any, err2: typing.Any) -> np.ndarray:
    """Closed-form d(1 - r)/d sigma2_i = (r * sbar_i - ebar_i) / ||sigma2 - mean||, unit-norm standardization."""
    s = _as_vector(sigma2, "pcc_grad_sigma")
    e = _as_vector(err2, "pcc_grad_sigma")
    cs, ce = s - s.mean(), e - e.mean()
    ns, ne = np.linalg.norm(cs), np.linalg.norm(ce)
    if ns == 0.0 or ne == 0.0:
        return np.zeros_like(s)
    r = float(np.dot(cs, ce) / (ns * ne))
    return (r * cs / ns - ce / ne) / ns


def verify_mse_identity(sigma2: typing.Any, err2: typing.Any) -> MseIdentityCheck:
    """MSE of standardized vectors against the exact (2N-2)/(2N) * (1 - r) form."""
    s = standardize(sigma2)
    e = standardize(err2)
    n = s.size
    r = pearson(sigma2, err2).value
    lhs = float(np.sum((s - e) ** 2) / (2 * n))
    rhs = float((2 * n - 2) / (2 * n) * (1.0 - r))
    return MseIdentityCheck(n=n, r=r, lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))


def nll_loss_from_errors(graph: Graph, err2: Tensor, sigma2: Tensor) -> Tensor:
    """Mean over samples of err2 / (2 sigma2) + log(sigma2) / 2."""
    if err2.shape != sigma2.shape:
        raise ShapeError(f"nll_loss: error shape {err2.shape} vs variance shape {sigma2.shape}")
    if not np.all(sigma2.value > 0):
        raise DomainError("nll_loss: variances must be strictly positive")
    ratio = graph.div(err2, graph.scale(sigma2, 2.0))
    return graph.mean(graph.add(ratio, graph.scale(graph.log(sigma2), 0.5)))


def nll_loss(graph: Graph, y_pred: Tensor, y: typing.Any, sigma2: Tensor) -> Tensor:
    target = graph.constant(y) if not isinstance(y, Tensor) else y
    if target.shape != y_pred.shape:
        raise ShapeError(f"nll_loss: prediction shape {y_pred.shape} vs label shape {target.shape}")
    err2 = graph.sum(graph.square(graph.sub(y_pred, target)), axis=1)
    return nll_loss_from_errors(graph, err2, sigma2)


def nll_grad_sigma(sigma2: typing.Any, err2: typing.Any) -> np.ndarray:
    """Per-sample d/d sigma2 of err2 / (2 sigma2) + log(sigma2) / 2, i.e. (sigma2 - err2) / (2 sigma2^2)."""
    s = np.asarray(sigma2, dtype=np.float64)
    e = np.asarray(err2, dtype=np.float64)
    if not np.all(s > 0):
        raise DomainError("nll_grad_sigma: variances must be strictly positive")
    return (s - e) / (2.0 * s * s)


def _check_labels(task: str, y_pred_shape: tuple[int, ...], labels: np.ndarray) -> None:
    if labels.shape != y_pred_shape:
        raise ShapeError(f"{task}: prediction shape {y_pred_shape} vs label shape {labels.shape}")


def per_sample_error_tensor(graph: Graph, task: str, y_pred: Tensor, labels: typing.Any) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    _check_labels(task, y_pred.shape, labels)
    if task == "classification":
        return graph.scale(graph.sum(graph.mul(graph.log_softmax(y_pred), graph.constant(labels)), axis=1), -1.0)
    return graph.sum(graph.square(graph.sub(y_pred, graph.constant(labels))), axis=1)


def downstream_loss(graph: Graph, task: str, y_pred: Tensor, labels: typing.Any) -> Tensor:
    """MSE for regression, cross entropy for classification; batch mean."""
    return graph.mean(per_sample_error_tensor(graph, task, y_pred, labels))


def per_sample_error(task: str, y_pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    y_pred = np.asarray(y_pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _check_labels(task, y_pred.shape, labels)
    if task == "classification":
        return -np.sum(special.log_softmax(y_pred, axis=1) * labels, axis=1)
    return np.sum((y_pred - labels) ** 2, axis=1)
