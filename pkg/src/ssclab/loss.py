"""Classification losses and the epoch-gated total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass
class AttributeStats:
    """Positive-sample ratio ``r_j`` of each attribute over the training labels."""

    ratios: np.ndarray

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if np.any(self.ratios < 0) or np.any(self.ratios > 1):
            raise ValueError("positive ratios must lie in [0, 1]")

    def weights(self, labels) -> np.ndarray:
        """Imbalance weights ``y e^(1-r) + (1-y) e^r`` for a (b, M) label batch."""
        y = np.asarray(labels, dtype=np.float64)
        return y * np.exp(1.0 - self.ratios) + (1.0 - y) * np.exp(self.ratios)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    spac: float
    semc: float
    gated: bool

    @property
    def total_value(self) -> float:
        return self.total.item()


def bce_loss(logits, labels) -> Tensor:
    """Binary cross-entropy on logits, summed over attributes, averaged over the batch."""
    z = T.as_tensor(logits)
    per = T.bce_with_logits(z, labels)
    return T.reduce(per, "sum") * (1.0 / z.shape[0])


def bce_from_probs(p, labels, eps=PROB_EPS) -> float:
    """Probability-form BCE with clamping to ``[eps, 1 - eps]`` (evaluation only)."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).sum() / len(p))


def weighted_bce(logits, labels, stats: AttributeStats) -> Tensor:
    z = T.as_tensor(logits)
    per = T.bce_with_logits(z, labels, stats.weights(labels).astype(z.dtype))
    return T.reduce(per, "sum") * (1.0 / z.shape[0])


def gate_open(epoch: int, initial_epoch: int) -> bool:
    return epoch > initial_epoch


def total_loss(cls, spac, semc, epoch: int, cfg) -> LossBreakdown:
    """``cls + 1{epoch > i_e} (lambda1 spac + lambda2 semc)``.

    With the gate closed the consistency terms are not added at all, so the
    total is the classification tensor itself.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    cls = T.as_tensor(cls)
    gated = gate_open(epoch, cfg.initial_epoch)
    if not gated:
        return LossBreakdown(cls, cls.item(), 0.0, 0.0, False)
    spac, semc = T.as_tensor(spac, cls), T.as_tensor(semc, cls)
    total = cls + (spac * cfg.lambda1 + semc * cfg.lambda2)
    return LossBreakdown(total, cls.item(), spac.item(), semc.item(), True)
