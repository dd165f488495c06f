"""Command-line entry point: ``kernsurv {synth,fit,predict,intervals,evaluate}``.

Every command writes ``manifest.json`` into ``--out`` with the fully resolved
configuration, so a run can be repeated without the original shell line.
All randomness is derived from ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import calibrate, local_quantile, marginal_quantile, prediction_set
from .data import (
    CsvSchema,
    DataError,
    Standardization,
    SurvivalDataset,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    snap_times,
    write_csv,
)
from .estimator import kaplan_meier
from .evaluation import ctd_index, ctd_with_bootstrap, local_coverage_experiment, marginal_coverage_experiment
from .kernel import KernelError, load_kernel_matrix, parse_kernel
from .neural import ARCHITECTURES, MLPSpec, build, mds_embed, survival_loss
from .neural.model import KernelSurvivalModel
from .neural.train import TrainConfig

# Adam / time-grid / MLP search grid used by cross-validation
CV_GRID = {
    "epochs": (10, 20),
    "batch_size": (64, 128),
    "learning_rate": (0.01, 0.001),
    "grid_points": (64, 128),
}
MLP_GRID = {"hidden_layers": (1, 2, 4), "hidden_width": (16, 32, 64)}
CV_FOLDS = 5


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _m_list(text: str) -> list[int | None]:
    out = []
    for v in text.split(","):
        v = v.strip()
        if not v:
            continue
        if v == "all":
            out.append(None)
        else:
            try:
                out.append(int(v))
            except ValueError:
                raise argparse.ArgumentTypeError(f"--m-times takes integers or 'all', got {v!r}") from None
    return out


def _names(text: str | None):
    return [s.strip() for s in text.split(",") if s.strip()] if text else None


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _enc(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _enc(v) for k, v in r.items()})


def _manifest(args, out: Path, extra: dict | None = None) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    inputs = {}
    for key in ("train", "calib", "test", "query", "model", "warm_start"):
        p = config.get(key)
        if p:
            inputs[key] = {"path": str(p), "sha256": _sha256(p)}
    if isinstance(config.get("kernel"), str) and config["kernel"].startswith("precomputed:"):
        p = config["kernel"].partition(":")[2]
        inputs["kernel"] = {"path": p, "sha256": _sha256(p)}
    doc = {"command": args.command, "version": __version__, "config": config, "inputs": inputs}
    if extra:
        doc.update(extra)
    _dump(out / "manifest.json", doc)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _schema(args, standardization: Standardization | None = None, features=None) -> CsvSchema:
    return CsvSchema(args.time_col, args.event_col, features if features is not None else _names(args.features),
                     bool(getattr(args, "standardize", False)) and standardization is None, standardization)


def load_features(path, names, standardization: Standardization | None = None) -> np.ndarray:
    """Feature matrix from a headered CSV; time/event columns, if present, are ignored."""
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
    missing = [n for n in names if n not in col]
    if missing:
        raise DataError(f"{path}: missing feature column {missing[0]!r}")
    X = np.empty((len(rows), len(names)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(row)} cells, header has {len(header)}")
        for k, name in enumerate(names):
            cell = row[col[name]].strip()
            try:
                X[i, k] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i + 1}, column {name!r}: cannot parse {cell!r}") from None
            if not math.isfinite(X[i, k]):
                raise DataError(f"{path}: row {i + 1}, column {name!r}: non-finite value {cell!r}")
    return standardization.apply(X) if standardization is not None else X


def _model_features(model: KernelSurvivalModel) -> list[str]:
    names = model.train_data.feature_names
    if not names:
        raise CliError("model file carries no feature names")
    return list(names)


def _load_labeled(args, path, model: KernelSurvivalModel) -> SurvivalDataset:
    """Labeled file read with the model's feature columns and training standardization."""
    schema = CsvSchema(args.time_col, args.event_col, _model_features(model), False,
                       model.train_data.standardization)
    return load_csv(path, schema)


def _time_kwargs(args) -> dict:
    return {"method": args.time_estimator, "horizon": args.horizon}


def _estimator(model: KernelSurvivalModel, kernel_spec: str, points=None):
    if kernel_spec == "learned":
        return model.estimator
    return model.with_kernel(parse_kernel(kernel_spec, model.net, points))


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = SyntheticSpec(n=args.n, d=args.d, hazard_model=args.hazard_model, censoring_rate_target=args.censor,
                         seed=args.seed)
    data, truth = generate_synthetic(spec)
    write_csv(data, out / "synthetic.csv", args.time_col, args.event_col)
    _manifest(args, out, {"synthetic": spec.to_dict(), "censoring_rate": float(truth.censoring_rate),
                          "censored_fraction": data.censored_fraction})
    return 0


# ---------------------------------------------------------------- fit


@dataclass(frozen=True)
class Candidate:
    epochs: int
    batch_size: int
    learning_rate: float
    grid_points: int | None
    hidden_layers: int
    hidden_width: int

    def key(self):
        # lexicographic tie-break order; None (all unique times) sorts first
        return (self.epochs, self.batch_size, self.learning_rate,
                -1 if self.grid_points is None else self.grid_points, self.hidden_layers, self.hidden_width)

    def config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=seed, grid_points=self.grid_points)

    def mlp_spec(self) -> MLPSpec:
        return MLPSpec(self.hidden_layers, self.hidden_width)


def uses_mlp(arch: str) -> bool:
    return arch == "mlp" or arch.startswith("res-")


def cv_grid(arch: str, epochs=None, batch=None, lr=None, m=None, layers=None, width=None) -> list[Candidate]:
    """Cross-validation candidates; any axis given explicitly replaces its default values."""
    axes = [
        epochs or CV_GRID["epochs"],
        batch or CV_GRID["batch_size"],
        lr or CV_GRID["learning_rate"],
        m or CV_GRID["grid_points"],
    ]
    if uses_mlp(arch):
        axes += [layers or MLP_GRID["hidden_layers"], width or MLP_GRID["hidden_width"]]
    else:
        axes += [layers[:1] if layers else (2,), width[:1] if width else (32,)]
    cands = [Candidate(*combo) for combo in itertools.product(*axes)]
    return sorted(set(cands), key=Candidate.key)


def _folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _fit_one(arch, d, cand: Candidate, lam, seed, data: SurvivalDataset, warm_targets):
    net = build(arch, d, cand.mlp_spec(), lam, seed)
    return KernelSurvivalModel.fit(net, data, cand.config(seed), warm_targets)


def _cv_task(payload):
    arch, d, cand, lam, seed, train, valid, warm_targets = payload
    model = _fit_one(arch, d, cand, lam, seed, train, warm_targets)
    curves = (model.grid.times, model.predict_survival(valid.features))
    try:
        ctd = ctd_index(curves, valid).ctd
    except ValueError:
        ctd = math.nan
    # validation times may fall outside the fold's grid; snap to the nearest grid time
    snapped = valid.with_times(snap_times(valid.times, model.grid))
    loss = survival_loss(model.net, snapped, model.grid, train=False).value
    return ctd, loss


def cross_validate(arch, data: SurvivalDataset, candidates, lam, seed, warm_targets=None, jobs=1,
                   folds=CV_FOLDS, metric="ctd"):
    """Mean validation C^td and loss per candidate; returns (best, rows).

    ``metric`` picks the selection score: highest mean C^td or lowest mean loss.
    """
    parts = _folds(len(data), folds, seed)
    if min(len(p) for p in parts) < 2:
        raise CliError(f"a cross-validation fold has fewer than 2 subjects (n = {len(data)})")
    d = data.feature_dim
    tasks = []
    for ci, cand in enumerate(candidates):
        for f, valid_idx in enumerate(parts):
            train_idx = np.setdiff1d(np.arange(len(data)), valid_idx)
            wt = None if warm_targets is None else warm_targets[train_idx]
            tasks.append(((ci, f), (arch, d, cand, lam, seed + f, data.subset(train_idx),
                                    data.subset(valid_idx), wt)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = dict(zip([t[0] for t in tasks], ex.map(_cv_task, [t[1] for t in tasks])))
    else:
        results = {key: _cv_task(p) for key, p in tasks}

    rows, summary = [], []
    for ci, cand in enumerate(candidates):
        ctds = [results[(ci, f)][0] for f in range(folds)]
        losses = [results[(ci, f)][1] for f in range(folds)]
        for f in range(folds):
            rows.append({"candidate": ci, **cand.__dict__, "fold": f, "ctd": ctds[f], "loss": losses[f]})
        if metric == "ctd":
            score = float(np.nanmean(ctds)) if not np.all(np.isnan(ctds)) else -math.inf
        else:
            score = -float(np.mean(losses))
        summary.append((score, cand))
    # best score; ties go to the lexicographically smallest hyperparameters
    best = max(summary, key=lambda s: (s[0], tuple(-np.asarray(s[1].key(), float))))
    return best[1], rows


def _warm_targets(path, data: SurvivalDataset, dim: int):
    K = load_kernel_matrix(path).matrix
    if len(K) != len(data):
        raise KernelError(f"warm-start matrix has {len(K)} rows, training data has {len(data)} subjects")
    return mds_embed(K, dim).coords


def cmd_fit(args) -> int:
    out = _out_dir(args)
    data = load_csv(args.train, _schema(args))
    d = data.feature_dim
    warm = _warm_targets(args.warm_start, data, d) if args.warm_start else None
    extra = {}
    if args.cv:
        cands = cv_grid(args.arch, args.epochs, args.batch, args.lr, args.m_times, args.hidden_layers,
                        args.hidden_width)
        best, rows = cross_validate(args.arch, data, cands, args.lam, args.seed, warm, args.jobs,
                                    metric=args.cv_metric)
        _write_rows(out / "cv.csv", rows)
        extra["cv"] = {"folds": CV_FOLDS, "candidates": len(cands), "selection": f"validation {args.cv_metric}",
                       "selected": best.__dict__}
    else:
        best = Candidate(
            (args.epochs or [20])[0],
            (args.batch or [128])[0],
            (args.lr or [0.01])[0],
            (args.m_times or [None])[0],
            (args.hidden_layers or [2])[0],
            (args.hidden_width or [32])[0],
        )
        extra["selected"] = best.__dict__
    model = _fit_one(args.arch, d, best, args.lam, args.seed, data, warm)
    model.save(out / "model.json")
    extra["history"] = model.history
    _manifest(args, out, extra)
    return 0


# ---------------------------------------------------------------- predict


def cmd_predict(args) -> int:
    out = _out_dir(args)
    model = KernelSurvivalModel.load(args.model)
    X = load_features(args.query, _model_features(model), model.train_data.standardization)
    est = _estimator(model, args.kernel, np.vstack([model.train_data.features, X]))
    S = est.predict_survival(X)
    times = est.predict_times(X, **_time_kwargs(args), finite=False)
    grid = model.grid.times.tolist()
    preds = [{"index": i, "time": _enc(float(t)), "curve": {"times": grid, "survival": s.tolist()}}
             for i, (s, t) in enumerate(zip(S, times))]
    _dump(out / "predictions.json", {"time_estimator": args.time_estimator, "predictions": preds})
    _manifest(args, out)
    return 0


# ---------------------------------------------------------------- intervals


def _parse_center(text: str, n_query: int, model: KernelSurvivalModel, X: np.ndarray):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        try:
            i = int(parts[0])
        except ValueError:
            i = None
        if i is not None:
            if not 0 <= i < n_query:
                raise CliError(f"--center index {i} out of range for {n_query} query rows")
            return X[i]
    try:
        v = np.array([float(p) for p in parts])
    except ValueError:
        raise CliError(f"--center must be a query index or a feature vector, got {text!r}") from None
    if len(v) != X.shape[1]:
        raise CliError(f"--center vector has {len(v)} entries, model expects {X.shape[1]}")
    std = model.train_data.standardization
    return std.apply(v[None, :])[0] if std is not None else v


def cmd_intervals(args) -> int:
    out = _out_dir(args)
    model = KernelSurvivalModel.load(args.model)
    calib = _load_labeled(args, args.calib, model)
    if len(calib) == 0:
        raise CliError("calibration file is empty")
    X = load_features(args.query, _model_features(model), model.train_data.standardization)
    points = np.vstack([calib.features, X])
    est = model.estimator
    t_hat = est.predict_times(X, **_time_kwargs(args))
    scores = calibrate(lambda Z: est.predict_times(Z, **_time_kwargs(args)), calib)

    results, rows = [], []
    summary = {"mode": args.mode, "alpha": args.alpha}
    if args.mode == "marginal":
        qhat = {a: marginal_quantile(scores, a, args.seed) for a in args.alpha}
        summary["qhat"] = {str(a): _enc(q) for a, q in qhat.items()}
        for a in args.alpha:
            for i, t in enumerate(t_hat):
                js = prediction_set(t, qhat[a]).to_json(a)
                results.append({"query": i, **js})
                rows.append({"query": i, "alpha": a, "center": t, "radius": qhat[a]})
    else:
        kernel = parse_kernel(args.kernel, model.net, points)
        # None stands for x0 = x, one pair per query row
        centers = [None] if args.center is None else [_parse_center(args.center, len(X), model, X)]
        for a in args.alpha:
            for i, (x, t) in enumerate(zip(X, t_hat)):
                for x0 in centers:
                    x0 = x if x0 is None else x0
                    q = local_quantile(scores, kernel, x, x0, a, args.seed)
                    js = prediction_set(t, q).to_json(a)
                    results.append({"query": i, "x0": x0.tolist(), **js})
                    rows.append({"query": i, "alpha": a, "center": t, "radius": q})
    summary["intervals"] = results
    _dump(out / "intervals.json", summary)
    _write_rows(out / "intervals.csv", rows)
    _manifest(args, out)
    return 0


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    model = KernelSurvivalModel.load(args.model)
    test = _load_labeled(args, args.test, model)
    est = model.estimator
    metrics = args.metric or ["ctd"]
    summary = {}
    for metric in metrics:
        if metric == "ctd":
            rep = ctd_with_bootstrap((est.grid.times, est.predict_survival(test.features)), test, args.reps,
                                     args.seed)
            km = kaplan_meier(est.train)
            base = ctd_with_bootstrap(
                (km.times, np.tile(km.values, (len(test), 1))), test, args.reps, args.seed)
            summary["ctd"] = rep.to_dict()
            summary["ctd_marginal_km"] = base.to_dict()
            _write_rows(out / "ctd.csv", [{"model": "kernel", **_flat(rep.to_dict())},
                                          {"model": "marginal-km", **_flat(base.to_dict())}])
            continue
        t_hat = est.predict_times(test.features, **_time_kwargs(args))
        for a in args.alpha:
            if metric == "marginal-coverage":
                rep = marginal_coverage_experiment(est, test, a, args.reps, args.calib_fraction, args.seed, t_hat)
            elif metric == "local-coverage":
                kernel = parse_kernel(args.kernel, model.net, test.features)
                rep = local_coverage_experiment(est, kernel, test, a, args.reps, args.seed, t_hat=t_hat)
            else:
                raise CliError(f"unknown metric {metric!r}")
            stem = f"{metric.replace('-', '_')}_alpha{a:g}"
            rep.write(out, stem)
            summary[stem] = rep.to_dict()
    _dump(out / "report.json", summary)
    _manifest(args, out)
    return 0


def _flat(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update({f"{k}_{kk}": vv for kk, vv in v.items()})
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------- parser


def _add_common(p, schema=True):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    if schema:
        p.add_argument("--time-col", default="time")
        p.add_argument("--event-col", default="event")


def _add_prediction(p):
    p.add_argument("--model", required=True, help="model JSON written by fit")
    p.add_argument("--time-estimator", choices=("median", "mean"), default="median")
    p.add_argument("--horizon", type=float, default=None, help="upper limit for the mean survival time")


def _alpha_list(text: str) -> list[float]:
    vals = _floats(text)
    if not vals or any(not 0 < a < 1 for a in vals):
        raise argparse.ArgumentTypeError("alpha values must lie in (0, 1)")
    return vals


def _coverage_list(text: str) -> list[float]:
    return [round(1.0 - c, 12) for c in _alpha_list(text)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernsurv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset with known survival functions")
    _add_common(p)
    p.add_argument("--model", dest="hazard_model", choices=("exp", "clusters"), default="exp")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--censor", type=float, default=0.3, help="target censored fraction")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="train an embedding network and save the model")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--features", help="comma-separated feature columns (default: all others)")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--arch", choices=ARCHITECTURES, default="mlp")
    p.add_argument("--warm-start", dest="warm_start", help="n x n kernel matrix CSV for MDS warm start")
    p.add_argument("--epochs", type=_ints)
    p.add_argument("--batch", type=_ints)
    p.add_argument("--lr", type=_floats)
    p.add_argument("--m-times", dest="m_times", type=_m_list, help="grid sizes, or 'all' for unique times")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--hidden-layers", dest="hidden_layers", type=_ints)
    p.add_argument("--hidden-width", dest="hidden_width", type=_ints)
    p.add_argument("--cv", dest="cv", action="store_true", default=True)
    p.add_argument("--no-cv", dest="cv", action="store_false")
    p.add_argument("--cv-metric", dest="cv_metric", choices=("ctd", "loss"), default="ctd")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="survival curves and time estimates for query rows")
    _add_common(p)
    _add_prediction(p)
    p.add_argument("--query", required=True)
    p.add_argument("--kernel", default="learned")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("intervals", help="conformal prediction sets for query rows")
    _add_common(p)
    _add_prediction(p)
    p.add_argument("--calib", required=True)
    p.add_argument("--query", required=True)
    lvl = p.add_mutually_exclusive_group(required=True)
    lvl.add_argument("--alpha", type=_alpha_list, help="miscoverage levels, comma-separated")
    lvl.add_argument("--coverage", dest="alpha", type=_coverage_list, help="target coverages 1 - alpha")
    p.add_argument("--mode", choices=("marginal", "local"), default="marginal")
    p.add_argument("--center", help="query row index or feature vector (local mode; default: each query)")
    p.add_argument("--kernel", default="learned", help="kernel for local weights")
    p.set_defaults(func=cmd_intervals)

    p = sub.add_parser("evaluate", help="C^td and conformal coverage reports on a test file")
    _add_common(p)
    _add_prediction(p)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", action="append", choices=("ctd", "marginal-coverage", "local-coverage"))
    p.add_argument("--alpha", type=_alpha_list, default=[0.2])
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--calib-fraction", dest="calib_fraction", type=float, default=1.0)
    p.add_argument("--kernel", default="learned", help="kernel for local-coverage weights")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DataError, KernelError, ValueError, OSError) as exc:
        print(f"kernsurv {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
