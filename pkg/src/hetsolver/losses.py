"""Two-domain training objectives and the relative l2 metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFinite, ShapeMismatch, ZeroNorm
from .hetgraph import NodeKind

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "l_fluid", "l_solid", "sigma2_f", "sigma2_s",
                  "rel_l2_fluid", "rel_l2_solid", "rel_l2_combined")


@dataclass
class DomainLosses:
    """Per-domain MSE, each averaged over its own nodes and channels."""

    l_fluid: Tensor
    l_solid: Tensor

    def values(self) -> tuple[float, float]:
        return float(self.l_fluid.data), float(self.l_solid.data)


def domain_losses(pred: dict, target: dict) -> DomainLosses:
    return DomainLosses(
        ad.mse_reduce(pred[NodeKind.FLUID], target[NodeKind.FLUID]),
        ad.mse_reduce(pred[NodeKind.SOLID], target[NodeKind.SOLID]),
    )


def igbl(losses: DomainLosses, s_f, s_s) -> Tensor:
    """Uncertainty-balanced total loss with log-variances ``s = log sigma^2``.

    0.5 e^{-s_f} L_f + 0.5 e^{-s_s} L_s + 0.5 s_f + 0.5 s_s
    """
    s_f, s_s = ad.as_tensor(s_f), ad.as_tensor(s_s)
    for value in (losses.l_fluid, losses.l_solid):
        if not np.all(np.isfinite(ad.as_tensor(value).data)):
            raise NonFinite("domain loss is not finite")
    weighted = (ad.scale(ad.exp(-s_f) * losses.l_fluid, 0.5)
                + ad.scale(ad.exp(-s_s) * losses.l_solid, 0.5))
    return weighted + ad.scale(s_f + s_s, 0.5)


def fixed_weight_loss(losses: DomainLosses, w_f: float, w_s: float) -> Tensor:
    if not (w_f > 0 and w_s > 0):
        raise ValueError("loss weights must be positive")
    return ad.scale(losses.l_fluid, w_f) + ad.scale(losses.l_solid, w_s)


def relative_l2(pred, truth, mask=None) -> float:
    """Mean over samples of ||pred - truth|| / ||truth||, in percent.

    ``pred`` and ``truth`` have shape (samples, nodes, channels); ``mask``
    selects nodes. Samples whose masked truth is zero are skipped and counted
    in a warning; ``ZeroNorm`` is raised only if every sample is skipped.
    """
    acc = RelativeL2()
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    for p, t in zip(pred, truth):
        if mask is not None:
            p, t = p[np.asarray(mask, dtype=bool)], t[np.asarray(mask, dtype=bool)]
        acc.add(p, t)
    if acc.count == 0:
        raise ZeroNorm("every sample has a zero-norm ground truth")
    return acc.value


class RelativeL2:
    """Streaming accumulator for the sample-mean relative error."""

    def __init__(self) -> None:
        self.total = 0.0
        self.count = 0
        self.skipped = 0

    def add(self, pred: np.ndarray, truth: np.ndarray) -> None:
        self.add_norms(float(np.sum((pred - truth) ** 2)), float(np.sum(truth ** 2)))

    def add_norms(self, err_sq: float, ref_sq: float) -> None:
        if ref_sq <= 0.0:
            self.skipped += 1
            log.warning("skipping sample with zero-norm ground truth (%d so far)", self.skipped)
            return
        self.total += np.sqrt(err_sq / ref_sq)
        self.count += 1

    @property
    def value(self) -> float:
        return 100.0 * self.total / self.count if self.count else float("nan")
