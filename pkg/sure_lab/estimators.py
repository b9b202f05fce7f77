import logging
import typing

import numpy as np
from scipy import special

from .backbone import Backbone, ClassifierHead, PredictFn, fuse_predict
from .estimators_interface import Estimate, UncertaintyEstimator
from .propagation import combine, propagate
from .reconstruction import Completion
from .tensor import Graph

logger = logging.getLogger(__name__)


def _forward(backbone: Backbone, head: ClassifierHead, completion: Completion, stochastic: bool = False, rng=None):
    graph = Graph()
    y, sigma2 = fuse_predict(backbone, head, graph, [graph.constant(z) for z in completion.latents], stochastic, rng)
    return y.value, sigma2.value


def aggregate_outputs(task: str, outputs: typing.Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean prediction and variance across members/passes, summed over output components.

    Classification averages softmax probabilities; the returned scores are the log
    of the mean probabilities so that argmax and cross entropy read them directly.
    """
    stacked = np.stack(outputs)
    if task == "classification":
        probs = special.softmax(stacked, axis=-1)
        mean = probs.mean(axis=0)
        var = probs.var(axis=0).sum(axis=1)
        return np.log(np.maximum(mean, 1e-300)), var
    return stacked.mean(axis=0), stacked.var(axis=0).sum(axis=1)


class SureEstimator(UncertaintyEstimator):
    """Intrinsic variance from the head plus propagated reconstruction variance."""

    def __init__(self, backbone: Backbone, head: ClassifierHead, reference: PredictFn, propagate_input: bool = True):
        self.backbone = backbone
        self.head = head
        self.reference = reference
        self.propagate_input = propagate_input

    def estimate(self, completion: Completion) -> Estimate:
        y, sigma2_omega = _forward(self.backbone, self.head, completion)
        if not self.propagate_input:
            return Estimate(
                predictions=y, sigma2_input=None, sigma2_omega=sigma2_omega, sigma2_total=sigma2_omega.copy(), sensitivities={}
            )
        prop = propagate(self.reference, completion.latents, completion.rec_var.keys(), completion.rec_var)
        return Estimate(
            predictions=y,
            sigma2_input=prop.sigma2_input,
            sigma2_omega=sigma2_omega,
            sigma2_total=combine(prop.sigma2_input, sigma2_omega),
            sensitivities=prop.sensitivities,
        )


class PointEstimator(UncertaintyEstimator):
    def __init__(self, backbone: Backbone, head: ClassifierHead):
        self.backbone = backbone
        self.head = head

    def estimate(self, completion: Completion) -> Estimate:
        y, _ = _forward(self.backbone, self.head, completion)
        return Estimate(predictions=y, sigma2_input=None, sigma2_omega=None, sigma2_total=None, sensitivities={})


class McDropoutEstimator(UncertaintyEstimator):
    def __init__(self, backbone: Backbone, head: ClassifierHead, task: str, passes: int, seed: int):
        self.backbone = backbone
        self.head = head
        self.task = task
        self.passes = passes
        self.seed = seed

    def estimate(self, completion: Completion) -> Estimate:
        rng = np.random.default_rng(self.seed)
        outputs = [_forward(self.backbone, self.head, completion, True, rng)[0] for _ in range(self.passes)]
        predictions, var = aggregate_outputs(self.task, outputs)
        return Estimate(predictions=predictions, sigma2_input=None, sigma2_omega=None, sigma2_total=var, sensitivities={})


class EnsembleEstimator(UncertaintyEstimator):
    def __init__(self, backbone: Backbone, members: typing.Sequence[ClassifierHead], task: str):
        self.backbone = backbone
        self.members = list(members)
        self.task = task

    def estimate(self, completion: Completion) -> Estimate:
        outputs = [_forward(self.backbone, head, completion)[0] for head in self.members]
        predictions, var = aggregate_outputs(self.task, outputs)
        return Estimate(predictions=predictions, sigma2_input=None, sigma2_omega=None, sigma2_total=var, sensitivities={})
