"""Mini-batch Adam training for the survival loss and the MDS warm-start regression."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..data import DataError, SurvivalDataset, TimeGrid, build_time_grid, snap_to_grid
from .loss import loss_and_gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grid_points: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs, batch_size and learning_rate must be nonnegative (batch_size >= 1)")

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, n: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _optimizer(net, config: TrainConfig) -> Adam:
    return Adam(net.n_params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)


def batches(n: int, batch_size: int, rng, min_size: int = 1):
    """Shuffled index batches; a short final batch is dropped below ``min_size``."""
    perm = rng.permutation(n)
    for a in range(0, n, batch_size):
        idx = perm[a:a + batch_size]
        if len(idx) >= min_size:
            yield idx


def prepare(data: SurvivalDataset, grid_points: int | None) -> tuple[SurvivalDataset, TimeGrid]:
    grid = build_time_grid(data, grid_points)
    return snap_to_grid(data, grid), grid


def train(net, data: SurvivalDataset, config: TrainConfig, grid: TimeGrid | None = None):
    """Minimize the survival loss; returns ``(trained copy of net, per-epoch mean losses)``.

    Without ``grid`` one is built from ``config.grid_points`` and the data snapped onto it.
    """
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    if grid is None:
        data, grid = prepare(data, config.grid_points)
    if len(data) < 2:
        raise DataError("training needs at least 2 subjects")
    net = net.copy()
    b = min(config.batch_size, len(data))
    rng = np.random.default_rng(config.seed)
    opt = _optimizer(net, config)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for idx in batches(len(data), b, rng, min_size=2):
            value, grad, cache = loss_and_gradient(net, data.subset(idx), grid)
            net.update_buffers(cache)
            net.set_params(opt.step(net.get_params(), grad))
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d: loss %.6f", epoch + 1, history[-1])
    return net, history


def warm_start(net, data: SurvivalDataset, targets, config: TrainConfig):
    """Fit psi(X_i) to MDS targets by mean squared error; returns ``(fitted copy, history)``."""
    targets = np.asarray(targets, float)
    if targets.shape != (len(data), net.output_dim):
        raise ValueError(f"targets must have shape {(len(data), net.output_dim)}, got {targets.shape}")
    net = net.copy()
    b = min(config.batch_size, len(data))
    rng = np.random.default_rng(config.seed)
    opt = _optimizer(net, config)
    history = []
    for _ in range(config.epochs):
        losses = []
        for idx in batches(len(data), b, rng, min_size=2 if net.norm_layers() else 1):
            Z, cache = net.forward_cached(data.features[idx], True)
            r = Z - targets[idx]
            losses.append(float(np.mean(np.sum(r**2, axis=1))))
            grad = net.backward(2.0 * r / len(idx), cache)
            net.update_buffers(cache)
            net.set_params(opt.step(net.get_params(), grad))
        history.append(float(np.mean(losses)))
    return net, history


def warm_start_mse(net, data: SurvivalDataset, targets, train: bool = True) -> float:
    Z = net.forward(data.features, train=train)
    return float(np.mean(np.sum((Z - np.asarray(targets)) ** 2, axis=1)))
