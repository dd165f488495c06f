"""Survival datasets: CSV ingestion, splitting, time grids and synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import stats


class DataError(ValueError):
    """Raised for malformed survival data."""


class Subject(NamedTuple):
    features: np.ndarray
    observed_time: float
    event: int


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardization":
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        const = np.all(features == features[:1], axis=0)
        # constant columns: exact mean so they map to 0, unit scale
        mean = np.where(const, features[0], mean)
        scale = np.where(const | (scale == 0), 1.0, scale)
        return cls(mean=mean, scale=scale)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(mean=np.asarray(d["mean"], float), scale=np.asarray(d["scale"], float))


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Columnar (X, Y, delta) triples.

    ``features`` is ``(n, d)``, ``times`` holds observed times ``Y`` and
    ``events`` the indicators ``delta`` (1 = death observed, 0 = censored).
    """

    features: np.ndarray
    times: np.ndarray
    events: np.ndarray
    feature_names: tuple[str, ...] | None = None
    standardization: Standardization | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DataError("features must be a 2-d array")
        t = np.asarray(self.times, dtype=float).ravel()
        e = np.asarray(self.events).ravel()
        if not (len(X) == len(t) == len(e)):
            raise DataError(f"length mismatch: {len(X)} feature rows, {len(t)} times, {len(e)} events")
        if X.shape[1] < 1:
            raise DataError("need at least one feature column")
        if np.any(~np.isfinite(t)) or np.any(t < 0):
            raise DataError("observed times must be finite and nonnegative")
        if not np.all((e == 0) | (e == 1)):
            raise DataError("event indicators must be 0 or 1")
        if self.feature_names is not None and len(self.feature_names) != X.shape[1]:
            raise DataError("feature_names length does not match feature_dim")
        object.__setattr__(self, "features", _frozen(X, float))
        object.__setattr__(self, "times", _frozen(t, float))
        object.__setattr__(self, "events", _frozen(e, np.int64))
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> Subject:
        return Subject(self.features[i], float(self.times[i]), int(self.events[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def censored_fraction(self) -> float:
        return float(1.0 - self.events.mean()) if len(self) else 0.0

    def subset(self, index) -> "SurvivalDataset":
        index = np.asarray(index)
        return SurvivalDataset(
            self.features[index],
            self.times[index],
            self.events[index],
            self.feature_names,
            self.standardization,
        )

    def with_times(self, times) -> "SurvivalDataset":
        return SurvivalDataset(self.features, times, self.events, self.feature_names, self.standardization)


@dataclass(frozen=True)
class CsvSchema:
    time_col: str
    event_col: str
    features: Sequence[str] | None = None  # None: every other column
    standardize: bool = False
    # training-set statistics reused for calibration/test files
    standardization: Standardization | None = None


def load_csv(path, schema: CsvSchema) -> SurvivalDataset:
    """Read a headered, comma-separated survival file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(c.strip() for c in r)]

    col = {name: j for j, name in enumerate(header)}
    for name in (schema.time_col, schema.event_col):
        if name not in col:
            raise DataError(f"{path}: missing column {name!r}")
    if schema.features is None:
        feats = [h for h in header if h not in (schema.time_col, schema.event_col)]
    else:
        feats = list(schema.features)
    if not feats:
        raise DataError(f"{path}: no feature columns")
    for name in feats:
        if name not in col:
            raise DataError(f"{path}: missing feature column {name!r}")

    wanted = [schema.time_col, schema.event_col, *feats]
    values = np.empty((len(rows), len(wanted)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(row)} cells, header has {len(header)}")
        for k, name in enumerate(wanted):
            cell = row[col[name]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i + 1}, column {name!r}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {i + 1}, column {name!r}: non-finite value {cell!r}")
            values[i, k] = v

    times, events, X = values[:, 0], values[:, 1], values[:, 2:]
    bad = np.flatnonzero(times < 0)
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 1}, column {schema.time_col!r}: negative observed time")
    bad = np.flatnonzero((events != 0) & (events != 1))
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 1}, column {schema.event_col!r}: event must be 0 or 1")

    std = schema.standardization
    if std is None and schema.standardize:
        std = Standardization.fit(X)
    if std is not None:
        X = std.apply(X)
    return SurvivalDataset(X, times, events.astype(int), tuple(feats), std)


def write_csv(dataset: SurvivalDataset, path, time_col="time", event_col="event") -> None:
    names = dataset.feature_names or tuple(f"x{j + 1}" for j in range(dataset.feature_dim))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([time_col, event_col, *names])
        for x, t, e in zip(dataset.features, dataset.times, dataset.events):
            w.writerow([repr(float(t)), int(e), *(repr(float(v)) for v in x)])


def split(dataset: SurvivalDataset, fractions: Sequence[float], seed: int) -> list[SurvivalDataset]:
    """Seeded random partition; part sizes are rounded and the last part takes the remainder."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be positive and sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    if sum(sizes) > n:
        raise DataError("fractions leave no room for the last part")
    bounds = np.cumsum([0, *sizes, n - sum(sizes)])
    return [dataset.subset(np.sort(perm[a:b])) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray
    quantized: bool = False

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        if t.size == 0:
            raise DataError("time grid is empty")
        if np.any(t < 0) or np.any(np.diff(t) <= 0):
            raise DataError("grid times must be nonnegative and strictly increasing")
        object.__setattr__(self, "times", _frozen(t, float))

    def __len__(self) -> int:
        return len(self.times)

    def index_of(self, times) -> np.ndarray:
        """Grid indices of times that lie exactly on the grid."""
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.times, times)
        idx_c = np.minimum(idx, len(self.times) - 1)
        off = self.times[idx_c] != times
        if np.any(off):
            bad = np.asarray(times)[off].ravel()[0]
            raise DataError(f"observed time {bad!r} is not on the time grid")
        return idx_c


def build_time_grid(dataset: SurvivalDataset, m: int | None = None) -> TimeGrid:
    if len(dataset) == 0:
        raise DataError("cannot build a time grid from an empty dataset")
    if m is None:
        return TimeGrid(np.unique(dataset.times), quantized=False)
    lo, hi = float(dataset.times.min()), float(dataset.times.max())
    if m < 1 or (m == 1 and lo != hi):
        raise DataError(f"need m >= 2 grid points, got {m}")
    if lo == hi:
        return TimeGrid(np.array([lo]), quantized=True)
    return TimeGrid(np.linspace(lo, hi, m), quantized=True)


def snap_times(times, grid: TimeGrid) -> np.ndarray:
    """Nearest grid time, ties resolved towards the lower grid time."""
    g = grid.times
    times = np.asarray(times, dtype=float)
    hi = np.clip(np.searchsorted(g, times), 0, len(g) - 1)
    lo = np.clip(hi - 1, 0, len(g) - 1)
    take_hi = (g[hi] - times) < (times - g[lo])
    return np.where(take_hi, g[hi], g[lo])


def snap_to_grid(dataset: SurvivalDataset, grid: TimeGrid) -> SurvivalDataset:
    if not grid.quantized:
        return dataset
    if len(dataset) and (dataset.times.min() < grid.times[0] or dataset.times.max() > grid.times[-1]):
        raise DataError("time grid does not cover the observed times")
    return dataset.with_times(snap_times(dataset.times, grid))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic survival problem.

    hazard_model ``"exp"``: X ~ N(0, I), T ~ Exponential(rate exp(beta . x)),
    with ``beta`` defaulting to the first unit vector.

    hazard_model ``"clusters"``: a fair coin picks cluster c; X ~ N(c * separation * e1, I)
    and T ~ Weibull(shape, scale=scales[c]).
    """

    n: int
    d: int
    hazard_model: str = "exp"
    censoring_rate_target: float = 0.0
    seed: int = 0
    beta: tuple[float, ...] | None = None
    separation: float = 6.0
    scales: tuple[float, float] = (1.0, 4.0)
    shape: float = 2.0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise DataError("need n >= 1 and d >= 1")
        if not 0.0 <= self.censoring_rate_target < 1.0:
            raise DataError("censoring_rate_target must lie in [0, 1)")
        if self.hazard_model not in ("exp", "clusters"):
            raise DataError(f"unknown hazard model {self.hazard_model!r}")
        if self.beta is not None and len(self.beta) != self.d:
            raise DataError("beta must have d entries")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "hazard_model": self.hazard_model,
            "censoring_rate_target": self.censoring_rate_target,
            "seed": self.seed,
            "beta": list(self._beta()),
            "separation": self.separation,
            "scales": list(self.scales),
            "shape": self.shape,
        }

    def _beta(self) -> np.ndarray:
        if self.beta is not None:
            return np.asarray(self.beta, float)
        b = np.zeros(self.d)
        b[0] = 1.0
        return b


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Analytic S(t | x) of a synthetic problem; ``latent`` holds cluster ids when present."""

    survival: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    latent: np.ndarray | None = None
    censoring_rate: float = 0.0

    def __call__(self, t, x) -> np.ndarray:
        """Return S(t | x) with shape ``(len(x), len(t))``."""
        x = np.atleast_2d(np.asarray(x, float))
        t = np.atleast_1d(np.asarray(t, float))
        return self.survival(t, x)


def _tune_censoring(T: np.ndarray, E: np.ndarray, target: float, tol: float = 0.05) -> float:
    """Find an exponential censoring rate r, with C = E / r, hitting the target fraction."""

    def frac(log_r):
        return np.mean(T > E / np.exp(log_r))

    lo, hi = -30.0, 30.0
    best = None
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        if best is None or abs(f - target) < abs(best[1] - target):
            best = (mid, f)
        if abs(f - target) <= tol / 10:
            break
        if f < target:
            lo = mid
        else:
            hi = mid
    if abs(best[1] - target) > tol:
        raise DataError(f"censoring-rate tuning did not converge (best {best[1]:.3f} vs {target})")
    return float(np.exp(best[0]))


def generate_synthetic(spec: SyntheticSpec) -> tuple[SurvivalDataset, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n, spec.d
    X = rng.standard_normal((n, d))
    latent = None
    if spec.hazard_model == "exp":
        beta = spec._beta()
        rate = np.exp(X @ beta)
        T = rng.exponential(1.0, n) / rate

        def survival(t, x):
            return np.exp(-np.exp(x @ beta)[:, None] * t[None, :])

    else:
        latent = rng.integers(0, 2, n)
        X[:, 0] += latent * spec.separation
        scales = np.asarray(spec.scales, float)
        k, sep = spec.shape, spec.separation
        T = scales[latent] * rng.weibull(k, n)

        def survival(t, x):
            # posterior cluster membership given the first feature
            l0 = stats.norm.logpdf(x[:, 0])
            l1 = stats.norm.logpdf(x[:, 0] - sep)
            p1 = 1.0 / (1.0 + np.exp(l0 - l1))
            s0 = np.exp(-((t / scales[0]) ** k))
            s1 = np.exp(-((t / scales[1]) ** k))
            return (1 - p1)[:, None] * s0[None, :] + p1[:, None] * s1[None, :]

    E = rng.exponential(1.0, n)
    if spec.censoring_rate_target == 0.0:
        C = np.full(n, np.inf)
        rate = 0.0
    else:
        rate = _tune_censoring(T, E, spec.censoring_rate_target)
        C = E / rate
    events = (T <= C).astype(int)
    Y = np.minimum(T, C)
    names = tuple(f"x{j + 1}" for j in range(d))
    return SurvivalDataset(X, Y, events, names), GroundTruth(survival, latent, rate)
