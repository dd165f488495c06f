"""Leave-one-out kernel-hazard survival loss and its gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import DataError, SurvivalDataset, TimeGrid
from ..estimator import EPSILON

HAZARD_CLAMP = 1e-7


@dataclass
class LossReport:
    value: float
    per_batch: list[float] = field(default_factory=list)
    gradient_norm: float | None = None


def _pairwise_sq(Z: np.ndarray) -> np.ndarray:
    diff = Z[:, None, :] - Z[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def embedding_loss(Z: np.ndarray, grid_index: np.ndarray, events: np.ndarray, m: int,
                   eps: float = EPSILON, clamp: float = HAZARD_CLAMP, with_grad: bool = True):
    """Mean negative log-likelihood of the LOO kernel hazards given embeddings ``Z``.

    Returns ``(loss, dL/dZ)``; the gradient is ``None`` when ``with_grad`` is false.
    """
    b = len(Z)
    rows = np.arange(b)
    onehot = np.zeros((b, m))
    onehot[rows, grid_index] = 1.0
    died = onehot * events[:, None]
    at_risk = np.cumsum(onehot[:, ::-1], axis=1)[:, ::-1]  # 1{Y_j >= t_l}

    K = np.exp(-_pairwise_sq(Z))
    K[rows, rows] = 0.0  # leave subject i out of its own hazard

    survive = at_risk - died
    dK_num = K @ died
    denom = K @ at_risk + eps
    h = dK_num / denom
    # 1 - h from the surviving weight directly; 1 - (d / n) loses digits when h is near 1
    g = (K @ survive + eps) / denom
    hc = np.clip(h, clamp, 1.0 - clamp)
    gc = np.clip(g, clamp, 1.0 - clamp)
    # log h where the subject dies, log(1 - h) at earlier grid times and at censoring
    loss = -(np.sum(died * np.log(hc)) + np.sum(survive * np.log(gc))) / b
    if not with_grad:
        return float(loss), None

    free = (h > clamp) & (g > clamp)
    dh = np.where(free, -(died / hc - survive / gc) / b, 0.0)
    d_num = dh / denom
    d_den = -dh * dK_num / denom**2
    dK = d_num @ died.T + d_den @ at_risk.T
    dK[rows, rows] = 0.0
    dD = -K * dK
    S = dD + dD.T
    dZ = 2.0 * (S.sum(axis=1)[:, None] * Z - S @ Z)
    return float(loss), dZ


def _batch_arrays(batch: SurvivalDataset, grid: TimeGrid):
    if len(batch) < 2:
        raise DataError("the leave-one-out loss needs a batch of at least 2 subjects")
    return grid.index_of(batch.times), batch.events.astype(float)


def survival_loss(net, batch: SurvivalDataset, grid: TimeGrid, train: bool = True) -> LossReport:
    idx, ev = _batch_arrays(batch, grid)
    Z = net.forward(batch.features, train=train)
    value, _ = embedding_loss(Z, idx, ev, len(grid), with_grad=False)
    return LossReport(value, [value])


def loss_and_gradient(net, batch: SurvivalDataset, grid: TimeGrid, train: bool = True):
    """Returns ``(loss, flat gradient, forward cache)``."""
    idx, ev = _batch_arrays(batch, grid)
    Z, cache = net.forward_cached(batch.features, train)
    value, dZ = embedding_loss(Z, idx, ev, len(grid))
    return value, net.backward(dZ, cache), cache


def loss_gradient(net, batch: SurvivalDataset, grid: TimeGrid, train: bool = True) -> np.ndarray:
    return loss_and_gradient(net, batch, grid, train)[1]
