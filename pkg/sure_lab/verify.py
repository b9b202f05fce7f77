"""Analytic self-checks runnable without training anything.

Each check returns a CheckResult with the worst observed deviation and the
tolerance it was held to.
"""

import logging
import typing

import numpy as np

from .backbone import build_backbone, build_head, prediction_fn, project
from .estimators import SureEstimator
from .losses import nll_grad_sigma, nll_loss_from_errors, pcc_grad_sigma, pcc_loss, pcc_value, verify_mse_identity
from .nn import AdamOptimizer, train_step
from .propagation import mc_oracle, propagate
from .reconstruction import build_reconstructors, complete_latents
from .synth_data import ModalBatch
from .tensor import Graph, Parameter, Tensor, numeric_gradient, relative_error

logger = logging.getLogger(__name__)


class CheckResult(typing.TypedDict):
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str


def _result(name: str, worst: float, tolerance: float, detail: str = "") -> CheckResult:
    passed = bool(worst < tolerance)
    logger.info("%s %s worst=%.3g tol=%.3g %s", "PASS" if passed else "FAIL", name, worst, tolerance, detail)
    return CheckResult(name=name, passed=passed, worst=float(worst), tolerance=tolerance, detail=detail)


def check_mse_identity(seeds: int = 100, sizes: typing.Sequence[int] = (2, 16, 64, 256)) -> CheckResult:
    worst = 0.0
    for n in sizes:
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            worst = max(worst, verify_mse_identity(rng.uniform(0.01, 2.0, n), rng.uniform(0.0, 3.0, n))["gap"])
    return _result("mse_identity", worst, 1e-9, f"N in {list(sizes)}, {seeds} draws each")


def _grad_of(loss_fn: typing.Callable[[Graph, Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    graph = Graph()
    leaf = graph.leaf(x)
    return graph.grad_wrt(loss_fn(graph, leaf), leaf)


def _nll_value(sigma2: np.ndarray, err2: np.ndarray) -> float:
    return float(np.mean(err2 / (2.0 * sigma2) + 0.5 * np.log(sigma2)))


def check_gradient_oracle(seeds: int = 10, batch: int = 16, h: float = 1e-5) -> list[CheckResult]:
    """PCC and NLL autodiff gradients against central differences and their closed forms."""
    fd_worst, pcc_closed, nll_closed = 0.0, 0.0, 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        sigma2 = rng.uniform(0.5, 2.0, batch)
        err2 = rng.uniform(0.0, 2.0, batch)

        g_pcc = _grad_of(lambda g, s: pcc_loss(g, s, err2).loss, sigma2)
        fd_pcc = numeric_gradient(lambda s: pcc_value(s, err2).value, sigma2, h)
        g_nll = _grad_of(lambda g, s: nll_loss_from_errors(g, g.constant(err2), s), sigma2)
        fd_nll = numeric_gradient(lambda s: _nll_value(s, err2), sigma2, h)

        fd_worst = max(fd_worst, relative_error(g_pcc, fd_pcc), relative_error(g_nll, fd_nll))
        pcc_closed = max(pcc_closed, relative_error(g_pcc, pcc_grad_sigma(sigma2, err2)))
        # the loss is a batch mean; the closed form is per sample
        nll_closed = max(nll_closed, float(np.max(np.abs(g_nll * batch - nll_grad_sigma(sigma2, err2)))))
    return [
        _result("gradient_finite_difference", fd_worst, 1e-6, f"{seeds} batches of {batch}, h={h}"),
        _result("pcc_closed_form_gradient", pcc_closed, 1e-9),
        _result("nll_closed_form_gradient", nll_closed, 1e-9),
    ]


def check_nll_stationarity(n: int = 32, steps: int = 5000, lr: float = 5e-3, seed: int = 0) -> CheckResult:
    """Free variances under the NLL loss settle on the squared errors."""
    rng = np.random.default_rng(seed)
    err2 = rng.uniform(0.5, 2.0, n)
    log_var = Parameter("log_var", np.zeros(n))
    optimizer = AdamOptimizer(lr=lr)
    for _ in range(steps):
        graph = Graph()
        sigma2 = graph.exp(graph.param(log_var))
        train_step(graph, nll_loss_from_errors(graph, graph.constant(err2), sigma2), optimizer)
    worst = float(np.max(np.abs(np.exp(log_var.value) - err2) / err2))
    return _result("nll_stationarity", worst, 0.01, f"{steps} Adam steps at lr={lr}")


def check_scale_invariance(seeds: int = 100, batch: int = 32) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        sigma2 = rng.uniform(0.01, 2.0, batch)
        err2 = rng.uniform(0.0, 2.0, batch)
        a, b = rng.uniform(0.1, 10.0), rng.uniform(-5.0, 5.0)
        graph = Graph()
        base = pcc_loss(graph, graph.leaf(sigma2), err2).loss.value
        moved = pcc_loss(graph, graph.leaf(a * sigma2 + b), err2).loss.value
        worst = max(worst, float(abs(moved - base)))
    return _result("pcc_scale_invariance", worst, 1e-12, f"{seeds} affine maps")


def _linear_predict(weights: typing.Sequence[np.ndarray]):
    def predict(graph: Graph, latents: typing.Sequence[Tensor]) -> Tensor:
        out = graph.matmul(latents[0], graph.constant(weights[0]))
        for z, w in zip(latents[1:], weights[1:]):
            out = graph.add(out, graph.matmul(z, graph.constant(w)))
        return out

    return predict


def check_linear_propagation(seeds: int = 10, batch: int = 8, dim: int = 4, outputs: int = 3) -> CheckResult:
    """For y = Σ Z_i W_i the first-order variance Σ σ²_i ||W_i||²_F is exact."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        weights = [rng.normal(size=(dim, outputs)) for _ in range(3)]
        latents = [rng.normal(size=(batch, dim)) for _ in range(3)]
        rec_var = {1: rng.uniform(0.0, 0.5, batch), 2: rng.uniform(0.0, 0.5, batch)}
        got = propagate(_linear_predict(weights), latents, rec_var.keys(), rec_var).sigma2_input
        expected = sum(rec_var[i] * np.sum(weights[i] ** 2) for i in rec_var)
        worst = max(worst, relative_error(got, expected))
    return _result("linear_propagation_exact", worst, 1e-9)


def _relu_predict(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray):
    def predict(graph: Graph, latents: typing.Sequence[Tensor]) -> Tensor:
        hidden = graph.relu(graph.linear(graph.concat(list(latents)), graph.constant(w1), graph.constant(b1)))
        return graph.matmul(hidden, graph.constant(w2))

    return predict


def check_first_order_validity(
    seeds: int = 20, batch: int = 4, dim: int = 4, hidden: int = 16, variance: float = 1e-4, n_samples: int = 100_000
) -> CheckResult:
    """Two-layer ReLU path: propagated variance against a Monte-Carlo oracle at small σ²."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        w1 = rng.normal(size=(2 * dim, hidden)) / np.sqrt(2 * dim)
        b1 = rng.normal(size=hidden)
        w2 = rng.normal(size=(hidden, 2)) / np.sqrt(hidden)
        predict = _relu_predict(w1, b1, w2)
        latents = [rng.normal(size=(batch, dim)) for _ in range(2)]
        rec_var = {1: np.full(batch, variance)}
        first_order = propagate(predict, latents, [1], rec_var).sigma2_input
        oracle = mc_oracle(predict, latents, [1], rec_var, n_samples, seed)
        worst = max(worst, abs(float(first_order.sum()) / float(oracle.sum()) - 1.0))
    return _result("first_order_vs_monte_carlo", worst, 0.10, f"σ²={variance}, {n_samples} draws")


class _OpCase(typing.NamedTuple):
    shapes: tuple[tuple[int, ...], ...]
    build: typing.Callable[..., Tensor]
    positive: bool = False


def _op_cases(rng: np.random.Generator) -> dict[str, _OpCase]:
    r, c = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    k = int(rng.integers(2, 9))
    return {
        "matmul": _OpCase(((r, c), (c, k)), lambda g, a, b: g.matmul(a, b)),
        "add": _OpCase(((r, c), (r, c)), lambda g, a, b: g.add(a, b)),
        "sub": _OpCase(((r, c), (r, c)), lambda g, a, b: g.sub(a, b)),
        "mul": _OpCase(((r, c), (r, c)), lambda g, a, b: g.mul(a, b)),
        "div": _OpCase(((r, c), (r, c)), lambda g, a, b: g.div(a, b), positive=True),
        "scale": _OpCase(((r, c),), lambda g, a: g.scale(a, -1.7)),
        "relu": _OpCase(((r, c),), lambda g, a: g.relu(a)),
        "softplus": _OpCase(((r, c),), lambda g, a: g.softplus(a)),
        "exp": _OpCase(((r, c),), lambda g, a: g.exp(a)),
        "log": _OpCase(((r, c),), lambda g, a: g.log(a), positive=True),
        "square": _OpCase(((r, c),), lambda g, a: g.square(a)),
        "sqrt": _OpCase(((r, c),), lambda g, a: g.sqrt(a), positive=True),
        "sum": _OpCase(((r, c),), lambda g, a: g.sum(a, axis=1)),
        "mean": _OpCase(((r, c),), lambda g, a: g.mean(a, axis=0)),
        "concat": _OpCase(((r, c), (r, k)), lambda g, a, b: g.concat([a, b])),
        "slice": _OpCase(((r, c),), lambda g, a: g.slice(a, (slice(0, r - 1), 1))),
        "broadcast_row": _OpCase(((c,),), lambda g, a: g.broadcast_row(a, r)),
        "reshape": _OpCase(((r, c),), lambda g, a: g.reshape(a, (c, r))),
        "log_softmax": _OpCase(((r, c),), lambda g, a: g.log_softmax(a)),
    }


def _draw(rng: np.random.Generator, shape: tuple[int, ...], positive: bool) -> np.ndarray:
    if positive:
        return rng.uniform(0.5, 2.0, shape)
    x = rng.normal(size=shape)
    # keep relu inputs away from the kink
    return np.where(np.abs(x) < 0.05, np.copysign(0.05, x), x)


def op_gradient_errors(seed: int, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error of autodiff vs central differences, per op kind, for one random draw."""
    rng = np.random.default_rng(seed)
    errors = {}
    for kind, case in _op_cases(rng).items():
        inputs = [_draw(rng, s, case.positive) for s in case.shapes]
        scratch = Graph()
        out_shape = case.build(scratch, *[scratch.constant(x) for x in inputs]).shape
        weights = rng.normal(size=out_shape)

        def scalar(*arrays: np.ndarray) -> float:
            graph = Graph()
            out = case.build(graph, *[graph.constant(a) for a in arrays])
            return float(np.sum(out.value * weights))

        graph = Graph()
        leaves = [graph.leaf(x) for x in inputs]
        root = graph.sum(graph.mul(case.build(graph, *leaves), graph.constant(weights)))
        worst = 0.0
        for idx, leaf in enumerate(leaves):
            analytic = graph.grad_wrt(root, leaf)

            def partial(x: np.ndarray, idx: int = idx) -> float:
                arrays = list(inputs)
                arrays[idx] = x
                return scalar(*arrays)

            worst = max(worst, relative_error(analytic, numeric_gradient(partial, inputs[idx], h)))
        errors[kind] = worst
    return errors


def check_finite_difference_sweep(seeds: int = 10) -> CheckResult:
    worst, worst_kind = 0.0, ""
    for seed in range(seeds):
        for kind, err in op_gradient_errors(seed).items():
            if err > worst:
                worst, worst_kind = err, kind
    return _result("op_finite_difference_sweep", worst, 1e-6, f"worst op {worst_kind or 'none'}")


def check_decomposition(seed: int = 0, n_rows: int = 16) -> CheckResult:
    """σ̃²_Y splits exactly into σ̃²_input + σ̃²_ω, and σ̃²_input vanishes when nothing is missing."""
    rng = np.random.default_rng(seed)
    dims, latent_dim = [5, 4, 3], 4
    backbone = build_backbone(dims, latent_dim, 8, seed)
    reference = build_head(8, 8, 3, seed + 1, name="reference")
    head = build_head(8, 8, 3, seed + 2)
    reconstructors = build_reconstructors(len(dims), latent_dim, seed + 3)
    estimator = SureEstimator(backbone, head, prediction_fn(backbone, reference))
    batch = ModalBatch(
        [rng.normal(size=(n_rows, d)) for d in dims],
        np.ones((n_rows, len(dims)), dtype=bool),
        np.eye(3)[rng.integers(3, size=n_rows)],
        "classification",
    )
    worst = 0.0
    for missing in ((), (0,), (0, 2)):
        scenario = batch.with_missing(missing)
        completion = complete_latents(reconstructors, project(backbone, scenario), scenario.presence)
        est = estimator.estimate(completion)
        total, part_in, part_omega = est["sigma2_total"], est["sigma2_input"], est["sigma2_omega"]
        worst = max(worst, float(np.max(np.abs(total - (part_in + part_omega)))))
        if not missing:
            worst = max(worst, float(np.max(np.abs(part_in))))
    return _result("variance_decomposition", worst, 1e-15)


def run_all(seeds: int = 10) -> list[CheckResult]:
    return [
        check_decomposition(),
        check_mse_identity(),
        *check_gradient_oracle(seeds),
        check_nll_stationarity(),
        check_scale_invariance(),
        check_linear_propagation(seeds),
        check_first_order_validity(),
        check_finite_difference_sweep(seeds),
    ]
