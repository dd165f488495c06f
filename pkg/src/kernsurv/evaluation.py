"""Concordance, bootstrap intervals and the marginal/local coverage experiments."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .conformal import _REL_TOL, covers, marginal_quantile, nonconformity, predict_times
from .data import SurvivalDataset
from .estimator import SurvivalCurve, step_lookup
from .kernel import Kernel


# ---------------------------------------------------------------------------
# concordance


@dataclass
class ConcordanceReport:
    ctd: float
    comparable_pair_count: int
    bootstrap_interval: tuple[float, float] | None = None

    def to_dict(self):
        return {
            "ctd": self.ctd,
            "comparable_pairs": self.comparable_pair_count,
            "ci_low": None if self.bootstrap_interval is None else self.bootstrap_interval[0],
            "ci_high": None if self.bootstrap_interval is None else self.bootstrap_interval[1],
        }


def _curve_matrix(curves) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curves, tuple) and len(curves) == 2:
        times, values = curves
        return np.asarray(times, float), np.atleast_2d(np.asarray(values, float))
    curves = list(curves)
    times = curves[0].times
    if all(c.times.shape == times.shape and np.array_equal(c.times, times) for c in curves):
        return times, np.vstack([c.values for c in curves])
    # heterogeneous grids: merge onto the union of grid times
    union = np.unique(np.concatenate([c.times for c in curves]))
    return union, np.vstack([c(union) for c in curves])


def concordance_counts(times: np.ndarray, values: np.ndarray, Y: np.ndarray, delta: np.ndarray):
    """Sum of concordance credits and number of comparable pairs.

    A pair (i, j) is comparable when Y_i < Y_j and delta_i = 1; it is concordant
    when S(Y_i | X_i) < S(Y_i | X_j), and a tie earns 1/2.
    """
    credit = 0.0
    pairs = 0
    for i in np.flatnonzero(delta == 1):
        later = Y > Y[i]
        k = int(later.sum())
        if k == 0:
            continue
        s = step_lookup(times, values, [Y[i]])[:, 0]
        s_i, s_j = s[i], s[later]
        credit += np.sum(s_i < s_j) + 0.5 * np.sum(s_i == s_j)
        pairs += k
    return float(credit), pairs


def ctd_index(curves, test: SurvivalDataset) -> ConcordanceReport:
    """Time-dependent concordance of survival curves (one per test subject)."""
    times, values = _curve_matrix(curves)
    if len(values) != len(test):
        raise ValueError(f"{len(values)} curves for {len(test)} test subjects")
    credit, pairs = concordance_counts(times, values, test.times, test.events)
    if pairs == 0:
        raise ValueError("no comparable pairs")
    return ConcordanceReport(credit / pairs, pairs)


# ---------------------------------------------------------------------------
# bootstrap


class BootstrapInterval(NamedTuple):
    lo: float
    hi: float
    skipped: int = 0


def bootstrap_ci(statistic: Callable[[np.ndarray], float], test: SurvivalDataset | int, reps: int = 100,
                 seed: int = 0, level: float = 0.95) -> BootstrapInterval:
    """Percentile bootstrap over test rows.

    ``statistic`` receives an array of resampled row indices. Resamples on
    which it raises ``ValueError`` are skipped and counted.
    """
    if reps < 2:
        raise ValueError("need at least 2 bootstrap repetitions")
    n = test if isinstance(test, int) else len(test)
    rng = np.random.default_rng(seed)
    values, skipped = [], 0
    for _ in range(reps):
        idx = rng.integers(0, n, n)
        try:
            values.append(float(statistic(idx)))
        except ValueError:
            skipped += 1
    if len(values) < 2:
        raise ValueError("statistic undefined on almost every bootstrap resample")
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return BootstrapInterval(float(lo), float(hi), skipped)


def ctd_with_bootstrap(curves, test: SurvivalDataset, reps: int = 100, seed: int = 0) -> ConcordanceReport:
    times, values = _curve_matrix(curves)
    report = ctd_index((times, values), test)

    def stat(idx):
        credit, pairs = concordance_counts(times, values[idx], test.times[idx], test.events[idx])
        if pairs == 0:
            raise ValueError("no comparable pairs")
        return credit / pairs

    ci = bootstrap_ci(stat, test, reps, seed)
    report.bootstrap_interval = (ci.lo, ci.hi)
    return report


# ---------------------------------------------------------------------------
# coverage experiments


def quartile_summary(x) -> tuple[float, float]:
    """Median and quartile deviation (half the IQR); infinite values are allowed."""
    x = np.sort(np.asarray(x, float))
    if x.size == 0:
        return math.nan, math.nan
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="inverted_cdf")
    qd = math.inf if math.isinf(q3) else 0.5 * (q3 - q1)
    return float(med), float(qd)


def _mean_std(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    if np.any(np.isinf(x)):
        return math.inf, math.nan
    return float(np.mean(x)), float(np.std(x))


@dataclass
class CoverageReport:
    kind: str
    target: float
    empirical_coverages: np.ndarray
    mean: float
    std: float
    width_summary: dict
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        return {
            "kind": self.kind,
            "target": self.target,
            "mean": self.mean,
            "std": self.std,
            "widths": {k: enc(v) for k, v in self.width_summary.items()},
            "notes": self.notes,
        }

    def write(self, out_dir, stem: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        if self.rows:
            with (out / f"{stem}.csv").open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
                w.writeheader()
                for r in self.rows:
                    w.writerow({k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in r.items()})


def _halves(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_cal = int(round(0.5 * n))
    return perm[:n_cal], perm[n_cal:]


def _test_scores(estimator, test: SurvivalDataset, t_hat=None):
    if t_hat is None:
        t_hat = predict_times(estimator, test.features)
    t_hat = np.asarray(t_hat, float)
    return t_hat, nonconformity(test.times, test.events, t_hat)


def marginal_coverage_experiment(estimator, test: SurvivalDataset, alpha: float, reps: int = 100,
                                 calib_fraction: float = 1.0, seed: int = 0, t_hat=None) -> CoverageReport:
    """Repeated 50/50 calibration/proper-test splits of ``test`` with split conformal sets.

    Repetition r uses seed ``seed + r``. ``t_hat`` may carry precomputed
    survival-time estimates for the test rows.
    """
    if not 0.0 < calib_fraction <= 1.0:
        raise ValueError("calib_fraction must lie in (0, 1]")
    if len(test) < 4:
        raise ValueError("need at least 4 test subjects (2 in each half)")
    t_hat, scores = _test_scores(estimator, test, t_hat)
    coverages, widths, rows = [], [], []
    for r in range(reps):
        rng = np.random.default_rng(seed + r)
        cal, proper = _halves(len(test), rng)
        k = max(1, int(round(calib_fraction * len(cal))))
        if k < len(cal):
            cal = rng.choice(cal, size=k, replace=False)
        q = marginal_quantile(scores[cal], alpha, seed=seed + r)
        cov = float(np.mean(covers(test.times[proper], test.events[proper], t_hat[proper], q)))
        coverages.append(cov)
        widths.append(2.0 * q)
        rows.append({"rep": r, "alpha": alpha, "calib_fraction": calib_fraction, "n_calib": len(cal),
                     "coverage": cov, "width": 2.0 * q})
    mean_w, std_w = _mean_std(widths)
    return CoverageReport(
        "marginal",
        1.0 - alpha,
        np.asarray(coverages),
        float(np.mean(coverages)),
        float(np.std(coverages)),
        {"mean": mean_w, "std": std_w},
        rows,
    )


def _local_radii(sorted_scores, cum_w, total_w, inf_w, alpha):
    """Weighted quantile for each value of the +inf weight (shared calibration weights)."""
    inf_w = np.asarray(inf_w, float)
    totals = total_w + inf_w
    # same comparison as conformal._level_index, vectorized over the +inf weights
    j = np.searchsorted(cum_w, (1.0 - alpha) * totals * (1.0 - _REL_TOL), side="left")
    padded = np.append(sorted_scores, math.inf)
    out = padded[np.minimum(j, len(sorted_scores))]
    return np.where(totals > 0, out, math.inf)


def local_coverage_experiment(estimator, kernel: Kernel, test: SurvivalDataset, alpha: float, reps: int = 100,
                              seed: int = 0, n_centers: int = 100, n_draws: int = 100,
                              t_hat=None, gram=None) -> CoverageReport:
    """Local coverage: per repetition, 100 uniform centers x0 from the proper half and,
    per center, 100 proper points drawn with probability proportional to K(x, x0).

    ``gram`` may carry the precomputed test-by-test kernel matrix.
    """
    if len(test) < 4:
        raise ValueError("need at least 4 test subjects (2 in each half)")
    t_hat, scores = _test_scores(estimator, test, t_hat)
    G = kernel.gram(test.features, test.features) if gram is None else np.asarray(gram, float)
    coverages, rows, widths_all, notes = [], [], [], []
    skipped = 0
    for r in range(reps):
        rng = np.random.default_rng(seed + r)
        cal, proper = _halves(len(test), rng)
        order = np.argsort(scores[cal], kind="stable")
        cal_sorted = cal[order]
        s_sorted = scores[cal_sorted]
        centers = rng.choice(proper, size=n_centers, replace=True)
        for c_idx, c in enumerate(centers):
            w_prop = G[proper, c]
            tot = w_prop.sum()
            if tot <= 0:
                skipped += 1
                continue
            draws = rng.choice(proper, size=n_draws, replace=True, p=w_prop / tot)
            w_cal = G[cal_sorted, c]
            cum = np.cumsum(w_cal.astype(np.longdouble))
            total_cal = math.fsum(w_cal)
            radii = _local_radii(s_sorted, cum, total_cal, G[draws, c], alpha)
            hit = covers(test.times[draws], test.events[draws], t_hat[draws], radii)
            cov = float(np.mean(hit))
            widths = 2.0 * radii
            med, qd = quartile_summary(widths)
            coverages.append(cov)
            widths_all.append(widths)
            rows.append({"rep": r, "center": int(c), "center_slot": c_idx, "alpha": alpha,
                         "coverage": cov, "width_median": med, "width_qd": qd})
    if skipped:
        notes.append(f"{skipped} centers skipped: zero kernel weight over the proper half")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    if not coverages:
        raise ValueError("every local center had zero kernel weight")
    med, qd = quartile_summary(np.concatenate(widths_all))
    return CoverageReport(
        "local",
        1.0 - alpha,
        np.asarray(coverages),
        float(np.mean(coverages)),
        float(np.std(coverages)),
        {"median": med, "quartile_deviation": qd},
        rows,
        notes,
    )


def sweep_calibration_fraction(estimator, test: SurvivalDataset, alpha: float,
                               fractions: Sequence[float] = (0.1, 0.25, 0.5, 1.0), reps: int = 100,
                               seed: int = 0, t_hat=None) -> dict[float, CoverageReport]:
    if t_hat is None:
        t_hat = predict_times(estimator, test.features)
    return {f: marginal_coverage_experiment(estimator, test, alpha, reps, f, seed, t_hat) for f in fractions}


def as_curves(times, values) -> list[SurvivalCurve]:
    return [SurvivalCurve(times, v) for v in np.atleast_2d(values)]
