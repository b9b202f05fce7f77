import typing
from abc import ABC, abstractmethod

import numpy as np

from .reconstruction import Completion


class Estimate(typing.TypedDict):
    predictions: np.ndarray
    sigma2_input: np.ndarray | None
    sigma2_omega: np.ndarray | None
    sigma2_total: np.ndarray | None
    sensitivities: dict[int, np.ndarray]


class UncertaintyEstimator(ABC):
    @abstractmethod
    def estimate(self, completion: Completion) -> Estimate:
        """Predicts and attaches uncertainty for a batch whose latents are complete.

        Args:
            completion: Latents for every modality (true or reconstructed)
                and the reconstruction variances of the filled ones.

        Returns:
            An Estimate with raw-score predictions; uncertainty fields the
            method does not produce are None.
        """
        pass

