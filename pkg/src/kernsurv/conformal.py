"""Split conformal and kernel-weighted split conformal prediction sets for survival times."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import SurvivalDataset
from .kernel import Kernel

# tolerance for deciding that a cumulative weight reaches the 1 - alpha level
_REL_TOL = 1e-12


def nonconformity(y, delta, t_hat):
    """|y - t_hat| for observed deaths, (y - t_hat)^+ for censored subjects."""
    y = np.asarray(y, float)
    delta = np.asarray(delta)
    t_hat = np.asarray(t_hat, float)
    if np.any(~np.isfinite(t_hat)):
        raise ValueError("survival-time estimate must be finite")
    if np.any(y < 0) or np.any(t_hat < 0):
        raise ValueError("times must be nonnegative")
    out = np.where(delta == 1, np.abs(y - t_hat), np.maximum(y - t_hat, 0.0))
    return out if out.ndim else float(out)


def predict_times(estimator, X) -> np.ndarray:
    """Survival-time estimates from an object with ``predict_times`` or a plain callable."""
    f = getattr(estimator, "predict_times", estimator)
    return np.asarray(f(np.atleast_2d(X)), float)


@dataclass(frozen=True, eq=False)
class CalibrationScores:
    scores: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, float).ravel()
        if np.any(s < 0) or np.any(np.isnan(s)):
            raise ValueError("scores must be nonnegative")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "features", np.atleast_2d(np.asarray(self.features, float)))

    def __len__(self):
        return len(self.scores)


def calibrate(estimator, calib: SurvivalDataset) -> CalibrationScores:
    """Score every calibration subject; the estimator must not have seen these subjects."""
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    t_hat = predict_times(estimator, calib.features)
    return CalibrationScores(nonconformity(calib.times, calib.events, t_hat), calib.features)


def _level_index(cum: np.ndarray, total: float, alpha: float) -> int:
    target = (1.0 - alpha) * total
    return int(np.searchsorted(cum, target * (1.0 - _REL_TOL), side="left"))


def _sorted_with_inf(scores: np.ndarray, seed: int):
    """Scores plus the appended +inf, shuffled then stably sorted (random tie order)."""
    s = np.append(scores, np.inf)
    perm = np.random.default_rng(seed).permutation(len(scores))
    perm = np.append(perm, len(scores))
    order = perm[np.argsort(s[perm], kind="stable")]
    return s, order


def _as_scores(scores) -> np.ndarray:
    return scores.scores if isinstance(scores, CalibrationScores) else np.asarray(scores, float).ravel()


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def marginal_quantile(scores, alpha: float, seed: int = 0) -> float:
    """Order statistic of rank ceil((1 - alpha)(n + 1)) among the scores and +inf."""
    _check_alpha(alpha)
    s, order = _sorted_with_inf(_as_scores(scores), seed)
    n = len(s) - 1
    rank = _level_index(np.arange(1, n + 2, dtype=float), n + 1.0, alpha) + 1
    return float(s[order[min(rank, n + 1) - 1]])


def weighted_quantile(scores, weights, inf_weight: float, alpha: float, seed: int = 0) -> float:
    """1 - alpha quantile of scores weighted by ``weights``, with +inf carrying ``inf_weight``."""
    _check_alpha(alpha)
    s, order = _sorted_with_inf(_as_scores(scores), seed)
    w = np.append(np.asarray(weights, float), float(inf_weight))
    if np.any(w < 0):
        raise ValueError("kernel weights must be nonnegative")
    total = math.fsum(w)
    if total <= 0:
        warnings.warn("all kernel weights are zero; returning an infinite radius", RuntimeWarning, stacklevel=2)
        return math.inf
    cum = np.cumsum(w[order].astype(np.longdouble))
    j = _level_index(cum, total, alpha)
    return float(s[order[min(j, len(s) - 1)]])


def local_weights(scores: CalibrationScores, kernel: Kernel, x, x0):
    """Unnormalized weights K(X'_i, x0) and K(x, x0)."""
    x = np.asarray(x, float).reshape(1, -1)
    x0 = np.asarray(x0, float).reshape(1, -1)
    w = kernel.gram(scores.features, x0)[:, 0]
    return w, float(kernel.gram(x, x0)[0, 0])


def local_probabilities(scores: CalibrationScores, kernel: Kernel, x, x0) -> np.ndarray:
    """Probabilities p_1..p_n, p_inf of the weighted score distribution."""
    w, w_inf = local_weights(scores, kernel, x, x0)
    w = np.append(w, w_inf)
    return w / math.fsum(w)


def local_quantile(scores: CalibrationScores, kernel: Kernel, x, x0, alpha: float, seed: int = 0) -> float:
    w, w_inf = local_weights(scores, kernel, x, x0)
    return weighted_quantile(scores, w, w_inf, alpha, seed)


@dataclass(frozen=True)
class PredictionSet:
    center: float
    radius: float

    def __post_init__(self):
        if not self.center >= 0 or math.isinf(self.center):
            raise ValueError("center must be a finite nonnegative time")
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")

    @property
    def observed(self) -> tuple[float, float]:
        return max(self.center - self.radius, 0.0), self.center + self.radius

    @property
    def censored(self) -> tuple[float, float]:
        return 0.0, self.center + self.radius

    def __contains__(self, label) -> bool:
        y, delta = label
        lo, hi = self.observed if delta == 1 else self.censored
        return lo <= y <= hi

    def contains(self, y, delta) -> bool:
        return (y, delta) in self

    def to_json(self, alpha: float | None = None) -> dict:
        def enc(v):
            return "inf" if math.isinf(v) else v

        out = {
            "center": self.center,
            "radius": enc(self.radius),
            "observed": [enc(v) for v in self.observed],
            "censored": [0.0, enc(self.censored[1])],
        }
        if alpha is not None:
            out["alpha"] = alpha
        return out


def prediction_set(center: float, radius: float) -> PredictionSet:
    return PredictionSet(float(center), float(radius))


def covers(y, delta, t_hat, radius) -> np.ndarray:
    """Vectorized membership of labels (y, delta) in the prediction sets around ``t_hat``."""
    y, t_hat, radius = np.asarray(y, float), np.asarray(t_hat, float), np.asarray(radius, float)
    hi = t_hat + radius
    lo = np.maximum(t_hat - radius, 0.0)
    return np.where(np.asarray(delta) == 1, (y >= lo) & (y <= hi), y <= hi)
