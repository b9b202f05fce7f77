import logging
import time
import typing
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .backbone import VARIANCE_FLOOR
from .errors import ConfigError, ContractError, ShapeError
from .losses import LossValue, nll_loss_from_errors, pcc_loss
from .nn import LinearLayer, child_seeds, init_layer
from .tensor import Graph, Parameter, Tensor

logger = logging.getLogger(__name__)

LossKind = typing.Literal["pcc", "nll"]


@dataclass
class Reconstructor:
    """r^i: rebuilds modality `target`'s latent, with a variance, from another modality's latent.

    share(z)  = FC(ReLU(FC(z)))
    mean(z)   = FC(ReLU(FC(ReLU(share))))
    sigma(z)  = SoftPlus(FC(ReLU(FC(ReLU(share || mean)))))
    Source latents first pass through a bias-free per-source projection into a shared space.
    """

    target: int
    pre_projections: dict[int, LinearLayer]
    share: tuple[LinearLayer, LinearLayer]
    mean: tuple[LinearLayer, LinearLayer]
    sigma: tuple[LinearLayer, LinearLayer]

    def layers(self) -> list[LinearLayer]:
        return [self.pre_projections[j] for j in sorted(self.pre_projections)] + [*self.share, *self.mean, *self.sigma]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen


def build_reconstructor(target: int, n_modalities: int, latent_dim: int, seed: int, hidden_dim: int | None = None) -> Reconstructor:
    d, dh = latent_dim, hidden_dim or 2 * latent_dim
    name = f"rec{target}"
    seeds = child_seeds(seed, n_modalities + 6)
    pre = {
        j: init_layer(d, d, seeds[j], name=f"{name}.pre{j}", bias=False) for j in range(n_modalities) if j != target
    }
    s = seeds[n_modalities:]
    return Reconstructor(
        target,
        pre,
        (init_layer(d, dh, s[0], f"{name}.share0"), init_layer(dh, dh, s[1], f"{name}.share1")),
        (init_layer(dh, dh, s[2], f"{name}.mean0"), init_layer(dh, d, s[3], f"{name}.mean1")),
        (init_layer(dh + d, dh, s[4], f"{name}.sigma0"), init_layer(dh, 1, s[5], f"{name}.sigma1")),
    )


def build_reconstructors(n_modalities: int, latent_dim: int, seed: int, hidden_dim: int | None = None) -> list[Reconstructor]:
    seeds = child_seeds(seed, n_modalities)
    return [build_reconstructor(i, n_modalities, latent_dim, seeds[i], hidden_dim) for i in range(n_modalities)]


def reconstruct_graph(rec: Reconstructor, graph: Graph, z_source: Tensor, source: int) -> tuple[Tensor, Tensor]:
    if source == rec.target:
        raise ContractError(f"cannot reconstruct modality {rec.target} from itself")
    if source not in rec.pre_projections:
        raise ContractError(f"reconstructor {rec.target} has no projection for source {source}")
    h = rec.pre_projections[source].forward(graph, z_source)
    share = rec.share[1].forward(graph, graph.relu(rec.share[0].forward(graph, h)))
    hidden = graph.relu(rec.mean[0].forward(graph, graph.relu(share)))
    mean = rec.mean[1].forward(graph, hidden)
    joint = graph.relu(graph.concat([share, mean]))
    raw = rec.sigma[1].forward(graph, graph.relu(rec.sigma[0].forward(graph, joint)))
    n = z_source.shape[0]
    var = graph.add(graph.reshape(graph.softplus(raw), (n,)), graph.constant(np.full(n, VARIANCE_FLOOR)))
    return mean, var


def reconstruct(rec: Reconstructor, z_source: np.ndarray, source: int) -> tuple[np.ndarray, np.ndarray]:
    """(Z̃^i, σ̃²_{z̃i}) of shapes (B, d) and (B,)."""
    graph = Graph()
    mean, var = reconstruct_graph(rec, graph, graph.constant(z_source), source)
    return mean.value, var.value


def reconstruct_average(
    reconstructors: typing.Sequence[Reconstructor], available: dict[int, np.ndarray], target: int
) -> tuple[np.ndarray, np.ndarray]:
    """Average the per-source means and per-source variances."""
    if not available:
        raise ContractError(f"no available modality to reconstruct {target} from")
    if target in available:
        raise ContractError(f"modality {target} is available; nothing to reconstruct")
    outs = [reconstruct(reconstructors[target], z, j) for j, z in sorted(available.items())]
    return np.mean([m for m, _ in outs], axis=0), np.mean([v for _, v in outs], axis=0)


class Completion(typing.NamedTuple):
    latents: list[np.ndarray]
    rec_var: dict[int, np.ndarray]


def complete_latents(
    reconstructors: typing.Sequence[Reconstructor], latents: typing.Sequence[np.ndarray], presence: np.ndarray
) -> Completion:
    """Row-wise reconstruct_average: each absent latent is the mean over that row's present sources."""
    n_rows, n_mod = presence.shape
    filled = [z.copy() for z in latents]
    rec_var: dict[int, np.ndarray] = {}
    for i in range(n_mod):
        absent = ~presence[:, i]
        if not absent.any():
            continue
        mean_sum = np.zeros_like(filled[i])
        var_sum = np.zeros(n_rows)
        counts = np.zeros(n_rows)
        for j in range(n_mod):
            if j == i:
                continue
            rows = np.flatnonzero(absent & presence[:, j])
            if rows.size == 0:
                continue
            m, v = reconstruct(reconstructors[i], latents[j][rows], j)
            mean_sum[rows] += m
            var_sum[rows] += v
            counts[rows] += 1
        if np.any(counts[absent] == 0):
            raise ContractError(f"rows missing modality {i} have no present source")
        rows = np.flatnonzero(absent)
        filled[i][rows] = mean_sum[rows] / counts[rows, None]
        var = np.zeros(n_rows)
        var[rows] = var_sum[rows] / counts[rows]
        rec_var[i] = var
    return Completion(filled, rec_var)


class RecTerm(typing.NamedTuple):
    """One (target, source) pair's share of a mini-batch."""

    z_hat: Tensor
    z_true: np.ndarray
    sigma2: Tensor


def pooled_rec_loss(graph: Graph, terms: typing.Sequence[RecTerm], lam: float = 1.0, kind: LossKind = "pcc") -> LossValue:
    """Σ_pairs (1/N_p) Σ ||Z̃ - Z||² + λ · L_unc, with L_unc taken once over every pair's rows concatenated."""
    if not terms:
        raise ShapeError("rec_loss needs at least one reconstruction term")
    n = sum(t.z_hat.shape[0] for t in terms)
    if n < 2:
        raise ShapeError(f"rec_loss needs a batch of at least 2, got {n}")
    mse, err2 = None, []
    for t in terms:
        sq = graph.square(graph.sub(t.z_hat, graph.constant(t.z_true)))
        pair_mse = graph.mean(graph.sum(sq, axis=1))
        mse = pair_mse if mse is None else graph.add(mse, pair_mse)
        err2.append(np.mean(sq.value, axis=1))
    if lam == 0.0:
        return LossValue(mse, False)
    sigma2 = terms[0].sigma2 if len(terms) == 1 else graph.concat([t.sigma2 for t in terms])
    errors = np.concatenate(err2)
    if kind == "nll":
        unc = nll_loss_from_errors(graph, graph.constant(errors), sigma2)
        return LossValue(graph.add(mse, graph.scale(unc, lam)), False)
    pcc = pcc_loss(graph, sigma2, errors)
    return LossValue(graph.add(mse, graph.scale(pcc.loss, lam)), pcc.degenerate)


def rec_loss(
    graph: Graph,
    z_hat: Tensor,
    z_true: np.ndarray,
    sigma2: Tensor,
    lam: float = 1.0,
    kind: LossKind = "pcc",
) -> LossValue:
    """(1/N) Σ ||Z̃ - Z||² + λ · L_unc(σ̃², per-sample error); per-sample error is the mean over latent coordinates."""
    return pooled_rec_loss(graph, [RecTerm(z_hat, z_true, sigma2)], lam, kind)


class ComplexityProbe(typing.TypedDict):
    modalities: int
    layers: int
    width: int
    op_count: int
    seconds: float


def complexity_probe(n_modalities: int, latent_dim: int, batch: int = 32, seed: int = 0) -> ComplexityProbe:
    """Forward cost of one pass through all M reconstructors, each fed one source latent."""
    if n_modalities < 2:
        raise ConfigError(f"reconstruction needs at least 2 modalities, got {n_modalities}")
    reconstructors = build_reconstructors(n_modalities, latent_dim, seed)
    z = np.random.default_rng(seed).normal(size=(batch, latent_dim))
    graph = Graph()
    start = time.perf_counter()
    for rec in reconstructors:
        source = (rec.target + 1) % n_modalities
        reconstruct_graph(rec, graph, graph.constant(z), source)
    seconds = time.perf_counter() - start
    fc_layers = len(reconstructors[0].share) + len(reconstructors[0].mean) + len(reconstructors[0].sigma)
    return ComplexityProbe(
        modalities=n_modalities, layers=fc_layers, width=latent_dim, op_count=graph.op_count, seconds=seconds
    )


def fit_linear_in_modalities(probes: typing.Sequence[ComplexityProbe]) -> dict[str, float]:
    ms = [p["modalities"] for p in probes]
    costs = [p["op_count"] for p in probes]
    fit = stats.linregress(ms, costs)
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "r_squared": float(fit.rvalue**2)}
