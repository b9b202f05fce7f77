import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, OptimizerError, ShapeError
from .tensor import Graph, Parameter, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = "SURE-CKPT-1"
ACTIVATIONS = ("identity", "relu", "softplus")


@dataclass
class LinearLayer:
    weight: Parameter
    bias: Parameter | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.value.shape[1]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def forward(self, graph: Graph, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.weight.name}: input shape {x.shape} does not match weight {self.weight.value.shape}")
        bias = None if self.bias is None else graph.param(self.bias)
        return graph.linear(x, graph.param(self.weight), bias)


def init_layer(in_dim: int, out_dim: int, seed: int, name: str = "linear", bias: bool = True) -> LinearLayer:
    """Glorot-uniform weights, zero bias."""
    if in_dim < 1 or out_dim < 1:
        raise ShapeError(f"{name}: layer dims must be >= 1, got ({in_dim}, {out_dim})")
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    weight = Parameter(f"{name}.weight", rng.uniform(-limit, limit, size=(in_dim, out_dim)))
    b = Parameter(f"{name}.bias", np.zeros(out_dim)) if bias else None
    return LinearLayer(weight, b)


def activate(graph: Graph, x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return graph.relu(x)
    if activation == "softplus":
        return graph.softplus(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation: {activation}")


def child_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


@dataclass
class Mlp:
    """Stack of linear layers; each layer is followed by its activation, then its dropout."""

    layers: list[LinearLayer]
    activations: list[str]
    dropout: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.dropout:
            self.dropout = [0.0] * len(self.layers)
        if not (len(self.layers) == len(self.activations) == len(self.dropout)):
            raise ShapeError("Mlp: layers, activations and dropout must have equal length")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation: {act}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"Mlp: layer dims do not chain ({prev.out_dim} -> {nxt.in_dim})")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def freeze(self, frozen: bool = True) -> None:
        for layer in self.layers:
            layer.freeze(frozen)


def build_mlp(
    name: str,
    dims: typing.Sequence[int],
    activations: typing.Sequence[str],
    seed: int,
    dropout: typing.Sequence[float] | None = None,
) -> Mlp:
    seeds = child_seeds(seed, len(dims) - 1)
    layers = [init_layer(dims[i], dims[i + 1], seeds[i], name=f"{name}.{i}") for i in range(len(dims) - 1)]
    return Mlp(layers, list(activations), list(dropout) if dropout is not None else [])


def mlp_forward(
    mlp: Mlp,
    graph: Graph,
    x: Tensor,
    stochastic: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if x.shape[-1] != mlp.in_dim:
        raise ShapeError(f"mlp: input shape {x.shape} does not match in_dim {mlp.in_dim}")
    for layer, activation, rate in zip(mlp.layers, mlp.activations, mlp.dropout):
        x = activate(graph, layer.forward(graph, x), activation)
        if stochastic and rate > 0.0:
            if rng is None:
                raise ContractError("stochastic forward needs a random generator")
            # inverted dropout
            keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
            x = graph.mul(x, graph.constant(keep))
    return x


@dataclass
class AdamOptimizer:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def step(self, params_and_grads: typing.Iterable[tuple[Parameter, np.ndarray]]) -> None:
        pairs = list(params_and_grads)
        for p, g in pairs:
            if g.shape != p.value.shape:
                raise ShapeError(f"gradient for {p.name} has shape {g.shape}, parameter has {p.value.shape}")
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for {p.name}; step {self.step_count + 1} aborted")
        self.step_count += 1
        t = self.step_count
        for p, g in pairs:
            if p.frozen:
                continue
            m, v = self._moments.get(id(p), (np.zeros_like(g), np.zeros_like(g)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._moments[id(p)] = (m, v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(
    optimizer: AdamOptimizer, params: typing.Sequence[Parameter], grads: typing.Sequence[np.ndarray]
) -> list[Parameter]:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    optimizer.step(zip(params, grads))
    return list(params)


def train_step(graph: Graph, loss: Tensor, optimizer: AdamOptimizer) -> float:
    """Backpropagate `loss` and apply one optimizer step to every bound trainable parameter."""
    grads = [(p, g) for p, g in graph.parameter_grads(loss) if not p.frozen]
    optimizer.step(grads)
    return float(loss.value)


def save_checkpoint(path: str | Path, params: typing.Iterable[Parameter], extra: dict | None = None) -> None:
    entries = {}
    for p in params:
        if p.name in entries:
            raise ContractError(f"duplicate parameter name in checkpoint: {p.name}")
        entries[p.name] = {"shape": list(p.value.shape), "frozen": p.frozen, "data": p.value.reshape(-1).tolist()}
    payload = {"format": CHECKPOINT_HEADER, "extra": extra or {}, "parameters": entries}
    Path(path).write_text(json.dumps(payload))
    logger.debug("Wrote checkpoint %s (%d parameters)", path, len(entries))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Parameter], dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format") != CHECKPOINT_HEADER:
        raise ConfigError(f"{path} is not a {CHECKPOINT_HEADER} checkpoint")
    params = {
        name: Parameter(name, np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]), entry["frozen"])
        for name, entry in payload["parameters"].items()
    }
    return params, payload.get("extra", {})


def restore_parameters(targets: typing.Iterable[Parameter], loaded: dict[str, Parameter]) -> None:
    for p in targets:
        if p.name not in loaded:
            raise ConfigError(f"checkpoint has no parameter {p.name}")
        src = loaded[p.name]
        if src.value.shape != p.value.shape:
            raise ShapeError(f"{p.name}: checkpoint shape {src.value.shape} vs model {p.value.shape}")
        p.value = src.value.copy()
        p.frozen = src.frozen
