"""Kaplan-Meier, Beran's conditional Kaplan-Meier and survival-time estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .data import DataError, SurvivalDataset, TimeGrid, build_time_grid, snap_to_grid
from .kernel import Kernel

EPSILON = 1e-12
_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Right-continuous step function: S(t) = values[l] on [t_l, t_{l+1}), S(t) = 1 before t_1."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float).ravel()
        v = np.asarray(self.values, float).ravel()
        if t.shape != v.shape:
            raise ValueError("times and values differ in length")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.times)

    def __call__(self, t):
        return step_lookup(self.times, self.values[None, :], np.atleast_1d(t))[0]

    def to_json(self) -> dict:
        return {"times": self.times.tolist(), "survival": self.values.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SurvivalCurve":
        return cls(d["times"], d["survival"])


def step_lookup(grid_times: np.ndarray, values: np.ndarray, t) -> np.ndarray:
    """Evaluate step curves (rows of ``values``) at times ``t``; returns ``(rows, len(t))``."""
    idx = np.searchsorted(grid_times, np.asarray(t, float), side="right") - 1
    padded = np.concatenate([np.ones((values.shape[0], 1)), values], axis=1)
    return padded[:, idx + 1]


def kaplan_meier(dataset: SurvivalDataset) -> SurvivalCurve:
    if len(dataset) == 0:
        raise DataError("Kaplan-Meier needs at least one subject")
    times, inverse = np.unique(dataset.times, return_inverse=True)
    deaths = np.bincount(inverse, weights=dataset.events, minlength=len(times))
    at_time = np.bincount(inverse, minlength=len(times))
    at_risk = np.cumsum(at_time[::-1])[::-1]
    return SurvivalCurve(times, np.cumprod(1.0 - deaths / at_risk))


class ConditionalKaplanMeier:
    """Beran's estimator: Kaplan-Meier with each training subject weighted by K(x, X_i).

    Training times must lie on ``grid``; a quantized grid snaps them first.
    """

    def __init__(self, train: SurvivalDataset, kernel: Kernel, grid: TimeGrid | None = None,
                 epsilon: float = EPSILON):
        if len(train) == 0:
            raise DataError("empty training set")
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        if grid is None:
            grid = build_time_grid(train)
        train = snap_to_grid(train, grid)
        self.train = train
        self.kernel = kernel
        self.grid = grid
        self.epsilon = float(epsilon)
        n, m = len(train), len(grid)
        cols = grid.index_of(train.times)
        rows = np.arange(n)
        self._at = sparse.csr_matrix((np.ones(n), (rows, cols)), shape=(n, m))
        self._dead = sparse.csr_matrix((train.events.astype(float), (rows, cols)), shape=(n, m))

    @property
    def feature_dim(self) -> int:
        return self.train.feature_dim

    def _weights(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] != self.feature_dim:
            raise DataError(f"expected {self.feature_dim} features, got {X.shape[1]}")
        return self.kernel.gram(X, self.train.features)

    def hazards_from_weights(self, W: np.ndarray) -> np.ndarray:
        d = np.asarray(self._dead.T.dot(W.T).T)
        at = np.asarray(self._at.T.dot(W.T).T)
        n = np.cumsum(at[:, ::-1], axis=1)[:, ::-1]
        return np.clip(d / (n + self.epsilon), 0.0, 1.0)

    def hazards(self, X, exclude=None) -> np.ndarray:
        """Kernel hazards h(t_l | x), optionally leaving out one training index per query."""
        W = self._weights(X)
        if exclude is not None:
            exclude = np.atleast_1d(np.asarray(exclude))
            if exclude.shape != (len(W),):
                raise ValueError("need one excluded index per query")
            if np.any((exclude < 0) | (exclude >= len(self.train))):
                raise IndexError("excluded training index out of range")
            W[np.arange(len(W)), exclude] = 0.0
        return self.hazards_from_weights(W)

    def predict_survival(self, X) -> np.ndarray:
        """Survival values on the grid, one row per query."""
        X = np.atleast_2d(np.asarray(X, float))
        out = np.empty((len(X), len(self.grid)))
        for a in range(0, len(X), _CHUNK):
            out[a:a + _CHUNK] = np.cumprod(1.0 - self.hazards(X[a:a + _CHUNK]), axis=1)
        return out

    def curves(self, X) -> list[SurvivalCurve]:
        return [SurvivalCurve(self.grid.times, v) for v in self.predict_survival(X)]

    def predict_times(self, X, method: str = "median", horizon: float | None = None,
                      finite: bool = True) -> np.ndarray:
        """Survival-time estimates; with ``finite`` an infinite median becomes the last grid time."""
        S = self.predict_survival(X)
        t = self.grid.times
        if method == "median":
            out = median_times(t, S)
            if finite:
                out = np.where(np.isinf(out), t[-1], out)
            return out
        if method == "mean":
            return mean_times(t, S, horizon)
        raise ValueError(f"unknown time estimator {method!r}")

    __call__ = predict_times


def conditional_km(fit: ConditionalKaplanMeier, x) -> SurvivalCurve:
    return SurvivalCurve(fit.grid.times, fit.predict_survival(np.asarray(x, float).reshape(1, -1))[0])


def kernel_hazard(fit: ConditionalKaplanMeier, x, exclude: int | None = None) -> np.ndarray:
    x = np.asarray(x, float).reshape(1, -1)
    return fit.hazards(x, None if exclude is None else [exclude])[0]


def median_times(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Average of inf{t: S(t) <= 1/2} and sup{t: S(t) >= 1/2} for each row of step values."""
    values = np.atleast_2d(values)
    m = values.shape[1]
    below = values <= 0.5
    crossed = below.any(axis=1)
    first = np.where(crossed, times[np.argmax(below, axis=1)], np.inf)
    # values are non-increasing, so {S >= 1/2} is the prefix [0, t_{k}) with k = #values >= 1/2
    k = (values >= 0.5).sum(axis=1)
    ext = np.append(times, np.inf)
    last = ext[np.minimum(k, m)]
    return np.where(crossed, 0.5 * (first + last), np.inf)


def mean_times(times: np.ndarray, values: np.ndarray, horizon: float | None = None) -> np.ndarray:
    """Exact integral of the step curves over [0, horizon]."""
    values = np.atleast_2d(values)
    if horizon is None:
        horizon = float(times[-1])
    if horizon < times[-1]:
        raise ValueError(f"horizon {horizon} is below the last grid time {times[-1]}")
    widths = np.diff(np.append(times, horizon))
    return times[0] + values @ widths


def median_survival_time(curve: SurvivalCurve) -> float:
    return float(median_times(curve.times, curve.values[None, :])[0])


def mean_survival_time(curve: SurvivalCurve, horizon: float | None = None) -> float:
    return float(mean_times(curve.times, curve.values[None, :], horizon)[0])
