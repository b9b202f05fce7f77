"""Stand-in for a pretrained multimodal framework: projectors f^i, fusion ω, head g."""

import logging
import typing
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .losses import downstream_loss
from .nn import AdamOptimizer, LinearLayer, Mlp, build_mlp, child_seeds, init_layer, mlp_forward, train_step
from .synth_data import ModalBatch
from .tensor import Graph, Parameter, Tensor

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6

PredictFn = typing.Callable[[Graph, typing.Sequence[Tensor]], Tensor]


@dataclass
class Backbone:
    projectors: list[Mlp]
    fusion: Mlp

    def __post_init__(self) -> None:
        dims = {p.out_dim for p in self.projectors}
        if len(dims) != 1:
            raise ShapeError(f"projectors must share one latent dim, got {sorted(dims)}")
        if self.fusion.in_dim != self.latent_dim * self.n_modalities:
            raise ShapeError(f"fusion expects {self.fusion.in_dim} inputs, projectors give {self.latent_dim * self.n_modalities}")

    @property
    def n_modalities(self) -> int:
        return len(self.projectors)

    @property
    def latent_dim(self) -> int:
        return self.projectors[0].out_dim

    @property
    def fusion_dim(self) -> int:
        return self.fusion.out_dim

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def parameters(self) -> list[Parameter]:
        return [p for proj in self.projectors for p in proj.parameters()] + self.fusion.parameters()

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen


@dataclass
class ClassifierHead:
    """Shared trunk with a prediction branch and a softplus variance branch."""

    trunk: Mlp
    prediction: LinearLayer
    uncertainty: LinearLayer

    @property
    def output_dim(self) -> int:
        return self.prediction.out_dim

    def parameters(self) -> list[Parameter]:
        return self.trunk.parameters() + self.prediction.parameters() + self.uncertainty.parameters()

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen


def build_backbone(modality_dims: typing.Sequence[int], latent_dim: int, fusion_dim: int, seed: int) -> Backbone:
    seeds = child_seeds(seed, len(modality_dims) + 1)
    projectors = [
        build_mlp(f"backbone.f{i}", [n, latent_dim, latent_dim], ["relu", "identity"], seeds[i])
        for i, n in enumerate(modality_dims)
    ]
    fusion = build_mlp(
        "backbone.fusion", [latent_dim * len(modality_dims), fusion_dim, fusion_dim], ["relu", "relu"], seeds[-1]
    )
    return Backbone(projectors, fusion)


def build_head(fusion_dim: int, hidden: int, output_dim: int, seed: int, dropout_rate: float = 0.0, name: str = "head") -> ClassifierHead:
    seeds = child_seeds(seed, 3)
    trunk = build_mlp(f"{name}.trunk", [fusion_dim, hidden], ["relu"], seeds[0], dropout=[dropout_rate])
    return ClassifierHead(
        trunk,
        init_layer(hidden, output_dim, seeds[1], name=f"{name}.prediction"),
        init_layer(hidden, 1, seeds[2], name=f"{name}.uncertainty"),
    )


def project_rows(backbone: Backbone, graph: Graph, x: Tensor, modality: int) -> Tensor:
    return mlp_forward(backbone.projectors[modality], graph, x)


def project(backbone: Backbone, batch: ModalBatch) -> list[np.ndarray]:
    """Z^i for every modality; rows where modality i is absent stay zero and are never computed."""
    graph = Graph()
    latents = []
    for i, x in enumerate(batch.modalities):
        z = np.zeros((batch.size, backbone.latent_dim))
        rows = np.flatnonzero(batch.presence[:, i])
        if rows.size:
            z[rows] = project_rows(backbone, graph, graph.constant(x[rows]), i).value
        latents.append(z)
    return latents


def fuse(backbone: Backbone, graph: Graph, latents: typing.Sequence[Tensor | None]) -> Tensor:
    if len(latents) != backbone.n_modalities or any(z is None for z in latents):
        raise ContractError("fusion needs one latent per modality; reconstruct missing ones first")
    return mlp_forward(backbone.fusion, graph, graph.concat(typing.cast(list[Tensor], latents)))


def head_forward(
    head: ClassifierHead,
    graph: Graph,
    features: Tensor,
    stochastic: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    hidden = mlp_forward(head.trunk, graph, features, stochastic, rng)
    y = head.prediction.forward(graph, hidden)
    raw = graph.softplus(head.uncertainty.forward(graph, hidden))
    n = features.shape[0]
    sigma2 = graph.add(graph.reshape(raw, (n,)), graph.constant(np.full(n, VARIANCE_FLOOR)))
    return y, sigma2


def fuse_predict(
    backbone: Backbone,
    head: ClassifierHead,
    graph: Graph,
    latents: typing.Sequence[Tensor | None],
    stochastic: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """(ỹ, σ̃²_ω): raw scores and the strictly positive intrinsic variance."""
    return head_forward(head, graph, fuse(backbone, graph, latents), stochastic, rng)


def prediction_fn(backbone: Backbone, head: ClassifierHead) -> PredictFn:
    def predict(graph: Graph, latents: typing.Sequence[Tensor]) -> Tensor:
        return fuse_predict(backbone, head, graph, latents)[0]

    return predict


def pretrain(
    backbone: Backbone,
    head: ClassifierHead,
    batch: ModalBatch,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> list[float]:
    """Train backbone and head on full-modality data with the downstream loss, then freeze the backbone."""
    if not batch.presence.all():
        raise ContractError("pretraining data must have every modality present")
    optimizer = AdamOptimizer(lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(batch.size)
        total, count = 0.0, 0
        for start in range(0, batch.size, batch_size):
            rows = order[start : start + batch_size]
            graph = Graph()
            latents = [
                project_rows(backbone, graph, graph.constant(x[rows]), i) for i, x in enumerate(batch.modalities)
            ]
            y, _ = fuse_predict(backbone, head, graph, latents)
            loss = downstream_loss(graph, batch.task, y, batch.labels[rows])
            total += train_step(graph, loss, optimizer) * rows.size
            count += rows.size
        history.append(total / count)
        logger.debug("pretrain epoch %d loss %.6f", epoch, history[-1])
    logger.info("Pretrained backbone for %d epochs, final loss %.4f", epochs, history[-1])
    backbone.freeze()
    return history
