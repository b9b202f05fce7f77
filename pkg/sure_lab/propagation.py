"""First-order propagation of reconstruction variance to the prediction.

σ̃²_input = Σ_{i∈J} S_i · σ̃²_{z̃i}, with S_i the squared Frobenius norm of the
Jacobian of the prediction w.r.t. the reconstructed latent Z̃_i (summed over
output components) and σ̃²_{z̃i} read as an isotropic per-coordinate variance.
"""

import logging
import typing
from dataclasses import dataclass, field

import numpy as np

from .backbone import PredictFn
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .tensor import Graph

logger = logging.getLogger(__name__)


@dataclass
class UncertaintyRecord:
    """Per-sample uncertainties for one evaluation scenario; None marks a field the method does not produce."""

    error: np.ndarray
    sigma2_input: np.ndarray | None = None
    sigma2_omega: np.ndarray | None = None
    sigma2_total: np.ndarray | None = None
    rec_var: dict[int, np.ndarray] = field(default_factory=dict)
    rec_error: dict[int, np.ndarray] = field(default_factory=dict)
    sensitivities: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.sigma2_input is not None and self.sigma2_omega is not None and self.sigma2_total is not None:
            if not np.array_equal(self.sigma2_total, self.sigma2_input + self.sigma2_omega):
                raise ContractError("total variance must equal input + intrinsic variance")


class PropagationResult(typing.NamedTuple):
    sigma2_input: np.ndarray
    sensitivities: dict[int, np.ndarray]


def sensitivities(predict: PredictFn, latents: typing.Sequence[np.ndarray], indices: typing.Iterable[int]) -> dict[int, np.ndarray]:
    """S_i per sample, one backward pass per output component.

    Rows of the prediction path are independent, so the gradient of the column
    sum w.r.t. Z̃_i holds each sample's own gradient in its row.
    """
    indices = sorted(set(indices))
    graph = Graph()
    leaves = [graph.leaf(z) for z in latents]
    out = predict(graph, leaves)
    if out.value.ndim != 2:
        raise ShapeError(f"prediction must be (batch, outputs), got {out.shape}")
    n_rows, n_out = out.shape
    result = {i: np.zeros(n_rows) for i in indices}
    for o in range(n_out):
        root = graph.sum(graph.slice(out, (slice(None), o)))
        graph.backward(root)
        for i in indices:
            g = graph.grad_wrt(root, leaves[i])
            result[i] += np.sum(g * g, axis=1)
    return result


def propagate(
    predict: PredictFn,
    latents: typing.Sequence[np.ndarray],
    reconstructed: typing.Iterable[int],
    rec_var: dict[int, np.ndarray],
) -> PropagationResult:
    indices = sorted(set(reconstructed))
    for i in indices:
        if i not in rec_var:
            raise ContractError(f"modality {i} is marked reconstructed but has no reconstruction variance")
    n_rows = latents[0].shape[0]
    if not indices:
        return PropagationResult(np.zeros(n_rows), {})
    sens = sensitivities(predict, latents, indices)
    total = np.zeros(n_rows)
    for i in indices:
        total += sens[i] * rec_var[i]
    return PropagationResult(total, sens)


def sensitivity_drift(
    reference: PredictFn,
    trained: PredictFn,
    latents: typing.Sequence[np.ndarray],
    indices: typing.Iterable[int],
) -> float:
    """Σ|S_trained - S_reference| / Σ S_reference over the given modalities and every row; 0 for identical paths."""
    indices = sorted(set(indices))
    if not indices:
        return 0.0
    ref = sensitivities(reference, latents, indices)
    new = sensitivities(trained, latents, indices)
    scale = sum(float(np.sum(ref[i])) for i in indices)
    if scale <= 0.0:
        raise DomainError("sensitivity drift: the reference path has zero sensitivity")
    return sum(float(np.sum(np.abs(new[i] - ref[i]))) for i in indices) / scale


def combine(sigma2_input: np.ndarray, sigma2_omega: np.ndarray) -> np.ndarray:
    """σ̃²_Y = σ̃²_input + σ̃²_ω."""
    sigma2_input = np.asarray(sigma2_input, dtype=np.float64)
    sigma2_omega = np.asarray(sigma2_omega, dtype=np.float64)
    if np.any(sigma2_input < 0) or np.any(sigma2_omega < 0):
        raise DomainError("variances to combine must be non-negative")
    return sigma2_input + sigma2_omega


def mc_oracle(
    predict: PredictFn,
    latents: typing.Sequence[np.ndarray],
    reconstructed: typing.Iterable[int],
    rec_var: dict[int, np.ndarray],
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Empirical prediction variance (summed over outputs) under Gaussian latent perturbation."""
    if n_samples < 1000:
        raise ConfigError(f"mc_oracle needs at least 1000 samples, got {n_samples}")
    indices = sorted(set(reconstructed))
    rng = np.random.default_rng(seed)
    n_rows = latents[0].shape[0]
    out = np.zeros(n_rows)
    for b in range(n_rows):
        if all(rec_var[i][b] == 0.0 for i in indices):
            continue
        draws = [np.repeat(z[b : b + 1], n_samples, axis=0) for z in latents]
        for i in indices:
            draws[i] = draws[i] + np.sqrt(rec_var[i][b]) * rng.normal(size=draws[i].shape)
        graph = Graph()
        y = predict(graph, [graph.constant(d) for d in draws]).value
        out[b] = float(np.sum(np.var(y, axis=0, ddof=1)))
    return out
