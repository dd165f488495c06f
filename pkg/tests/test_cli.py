import csv
import json

import numpy as np
import pytest

from kernsurv import cli
from kernsurv.data import CsvSchema, SurvivalDataset, load_csv, write_csv
from kernsurv.neural.model import KernelSurvivalModel


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 300, "--d", 2, "--censor", 0.3, "--seed", 1, "--out", root / "syn") == 0
    data = load_csv(root / "syn" / "synthetic.csv", CsvSchema("time", "event"))
    train, rest = data.subset(np.arange(150)), data.subset(np.arange(150, 300))
    write_csv(train, root / "train.csv")
    write_csv(rest, root / "test.csv")
    write_csv(train.subset(np.arange(100)), root / "small.csv")
    assert run("fit", "--train", root / "train.csv", "--arch", "basic", "--no-cv", "--epochs", 2,
               "--out", root / "fit") == 0
    return root


# ---------------------------------------------------------------- synth


def test_synth_reproducible(tmp_path):
    snapshots = []
    for _ in range(2):
        assert run("synth", "--model", "exp", "--n", 1000, "--censor", 0.3, "--seed", 7, "--out", tmp_path) == 0
        snapshots.append([(tmp_path / f).read_bytes() for f in ("synthetic.csv", "manifest.json")])
    assert snapshots[0] == snapshots[1]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["synthetic"]["hazard_model"] == "exp"


def test_synth_no_censoring_and_round_trip(tmp_path):
    assert run("synth", "--n", 50, "--d", 3, "--censor", 0, "--out", tmp_path) == 0
    data = load_csv(tmp_path / "synthetic.csv", CsvSchema("time", "event"))
    assert len(data) == 50 and data.feature_dim == 3
    assert np.all(data.events == 1)


def test_synth_invalid_flags(tmp_path, capsys):
    assert run("synth", "--n", 0, "--out", tmp_path) == 2
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------- fit


def test_fit_basic_single_parameter(workspace, tmp_path):
    assert run("fit", "--train", workspace / "small.csv", "--arch", "basic", "--no-cv", "--out", tmp_path) == 0
    model = KernelSurvivalModel.load(tmp_path / "model.json")
    assert model.net.n_params == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["inputs"]["train"]["sha256"]
    assert manifest["config"]["arch"] == "basic"


def test_fit_warm_start_wiring(workspace, tmp_path, monkeypatch):
    data = load_csv(workspace / "small.csv", CsvSchema("time", "event"))
    D2 = ((data.features[:, None] - data.features[None]) ** 2).sum(-1)
    np.savetxt(tmp_path / "K.csv", np.exp(-D2), delimiter=",")
    calls = []
    real = cli.mds_embed

    def spy(K, dim):
        calls.append((K.shape, dim))
        return real(K, dim)

    monkeypatch.setattr(cli, "mds_embed", spy)
    argv = ("fit", "--train", workspace / "small.csv", "--arch", "mlp", "--no-cv", "--epochs", 1)
    assert run(*argv, "--warm-start", tmp_path / "K.csv", "--out", tmp_path / "w") == 0
    assert calls == [((100, 100), 2)]
    assert run(*argv, "--out", tmp_path / "cold") == 0
    warm = KernelSurvivalModel.load(tmp_path / "w" / "model.json")
    cold = KernelSurvivalModel.load(tmp_path / "cold" / "model.json")
    assert not np.array_equal(warm.net.get_params(), cold.net.get_params())


def test_fit_warm_start_size_mismatch(workspace, tmp_path):
    np.savetxt(tmp_path / "K.csv", np.eye(3), delimiter=",")
    assert run("fit", "--train", workspace / "small.csv", "--arch", "mlp", "--no-cv",
               "--warm-start", tmp_path / "K.csv", "--out", tmp_path) == 2


def test_cv_grid_sizes():
    assert len(cli.cv_grid("mlp")) == 144
    assert len(cli.cv_grid("res-diag")) == 144
    assert len(cli.cv_grid("basic")) == 16
    assert len(cli.cv_grid("diag", lr=[0.01])) == 8


def test_cv_runs_and_is_parallel_deterministic(workspace, tmp_path):
    argv = ("fit", "--train", workspace / "small.csv", "--arch", "basic", "--epochs", 1, "--batch", 64,
            "--lr", "0.01,0.001", "--m-times", 16)
    assert run(*argv, "--out", tmp_path / "j1") == 0
    assert run(*argv, "--jobs", 2, "--out", tmp_path / "j2") == 0
    assert (tmp_path / "j1" / "model.json").read_bytes() == (tmp_path / "j2" / "model.json").read_bytes()
    assert (tmp_path / "j1" / "cv.csv").read_bytes() == (tmp_path / "j2" / "cv.csv").read_bytes()
    assert len(read_rows(tmp_path / "j1" / "cv.csv")) == 2 * 5


def test_cv_rejects_tiny_folds(tmp_path):
    write_csv(SurvivalDataset(np.arange(6.0)[:, None], np.arange(1.0, 7.0), np.ones(6, int)), tmp_path / "t.csv")
    assert run("fit", "--train", tmp_path / "t.csv", "--arch", "basic", "--epochs", 1, "--batch", 64,
               "--lr", 0.01, "--m-times", "all", "--out", tmp_path) == 2


# ---------------------------------------------------------------- predict


def test_predict_box_kernel_single_neighbor(workspace, tmp_path):
    train = load_csv(workspace / "train.csv", CsvSchema("time", "event"))
    write_csv(train.subset(np.arange(5)), tmp_path / "q.csv")
    assert run("predict", "--model", workspace / "fit" / "model.json", "--query", tmp_path / "q.csv",
               "--kernel", "box:1e-9", "--out", tmp_path) == 0
    preds = json.loads((tmp_path / "predictions.json").read_text())["predictions"]
    for i, p in enumerate(preds):
        t = np.array(p["curve"]["times"])
        s = np.array(p["curve"]["survival"])
        expected = np.where((t >= train.times[i]) & (train.events[i] == 1), 0.0, 1.0)
        np.testing.assert_allclose(s, expected, atol=1e-9)
        if train.events[i] == 0:
            assert p["time"] == "inf"


def test_predict_mean_wiring_and_determinism(workspace, tmp_path):
    model = KernelSurvivalModel.load(workspace / "fit" / "model.json")
    argv = ("predict", "--model", workspace / "fit" / "model.json", "--query", workspace / "test.csv",
            "--time-estimator", "mean", "--horizon", 10.0)
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "predictions.json").read_bytes() == (tmp_path / "b" / "predictions.json").read_bytes()
    got = [p["time"] for p in json.loads((tmp_path / "a" / "predictions.json").read_text())["predictions"]]
    X = load_csv(workspace / "test.csv", CsvSchema("time", "event")).features
    np.testing.assert_array_equal(got, model.predict_times(X, "mean", 10.0))


def test_predict_dimension_mismatch(workspace, tmp_path):
    (tmp_path / "q.csv").write_text("x1\n0.5\n")
    assert run("predict", "--model", workspace / "fit" / "model.json", "--query", tmp_path / "q.csv",
               "--out", tmp_path) == 2


# ---------------------------------------------------------------- intervals


@pytest.fixture(scope="module")
def isolated(tmp_path_factory):
    # subjects far apart: every training row is its own only neighbor, so the median equals its time
    root = tmp_path_factory.mktemp("iso")
    data = SurvivalDataset(np.arange(6.0)[:, None] * 100, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], np.ones(6, int))
    write_csv(data, root / "iso.csv")
    assert run("fit", "--train", root / "iso.csv", "--arch", "basic", "--no-cv", "--lr", 1e-12, "--epochs", 1,
               "--out", root) == 0
    return root


def test_intervals_perfect_estimator(isolated, tmp_path):
    assert run("intervals", "--model", isolated / "model.json", "--calib", isolated / "iso.csv",
               "--query", isolated / "iso.csv", "--alpha", 0.2, "--out", tmp_path) == 0
    out = json.loads((tmp_path / "intervals.json").read_text())
    assert out["qhat"] == {"0.2": 0.0}
    for iv, y in zip(out["intervals"], range(1, 7)):
        assert iv["center"] == pytest.approx(y) and iv["observed"][0] == iv["observed"][1] == iv["center"]


def test_intervals_local_constant_equals_marginal(workspace, tmp_path):
    common = ("--model", workspace / "fit" / "model.json", "--calib", workspace / "test.csv",
              "--query", workspace / "small.csv", "--alpha", "0.1,0.2")
    assert run("intervals", *common, "--out", tmp_path / "m") == 0
    assert run("intervals", *common, "--mode", "local", "--kernel", "constant", "--out", tmp_path / "l") == 0
    assert (tmp_path / "m" / "intervals.csv").read_bytes() == (tmp_path / "l" / "intervals.csv").read_bytes()


def test_intervals_widths_monotone(workspace, tmp_path):
    assert run("intervals", "--model", workspace / "fit" / "model.json", "--calib", workspace / "test.csv",
               "--query", workspace / "small.csv", "--coverage", "0.5,0.8,0.9,0.95", "--mode", "local",
               "--out", tmp_path) == 0
    radius = {}
    for r in read_rows(tmp_path / "intervals.csv"):
        radius.setdefault(r["query"], []).append(float(r["radius"]))
    for rs in radius.values():
        assert all(a <= b for a, b in zip(rs, rs[1:]))


def test_intervals_center_options(workspace, tmp_path):
    common = ("intervals", "--model", workspace / "fit" / "model.json", "--calib", workspace / "test.csv",
              "--query", workspace / "small.csv", "--alpha", 0.2, "--mode", "local")
    assert run(*common, "--center", 3, "--out", tmp_path / "i") == 0
    assert run(*common, "--center", "0.1,-0.2", "--out", tmp_path / "v") == 0
    assert len(read_rows(tmp_path / "i" / "intervals.csv")) == 100
    assert run(*common, "--center", 1000, "--out", tmp_path / "bad") == 2
    assert run(*common, "--center", "1,2,3", "--out", tmp_path / "bad") == 2


def test_intervals_empty_calibration(workspace, tmp_path):
    (tmp_path / "empty.csv").write_text("time,event,x1,x2\n")
    assert run("intervals", "--model", workspace / "fit" / "model.json", "--calib", tmp_path / "empty.csv",
               "--query", workspace / "small.csv", "--alpha", 0.2, "--out", tmp_path) == 2


# ---------------------------------------------------------------- evaluate


def test_evaluate_marginal_rows_and_determinism(workspace, tmp_path):
    argv = ("evaluate", "--model", workspace / "fit" / "model.json", "--test", workspace / "test.csv",
            "--metric", "marginal-coverage", "--alpha", 0.8, "--seed", 3)
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--out", tmp_path / "b") == 0
    assert len(read_rows(tmp_path / "a" / "marginal_coverage_alpha0.8.csv")) == 100
    for f in ("report.json", "marginal_coverage_alpha0.8.csv", "marginal_coverage_alpha0.8.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_evaluate_local_coverage(workspace, tmp_path):
    assert run("evaluate", "--model", workspace / "fit" / "model.json", "--test", workspace / "test.csv",
               "--metric", "local-coverage", "--reps", 2, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert 0.0 <= report["local_coverage_alpha0.2"]["mean"] <= 1.0


def test_evaluate_ctd_beats_marginal_km(tmp_path):
    wins = 0
    for seed in range(5):
        d = tmp_path / str(seed)
        assert run("synth", "--n", 400, "--d", 2, "--seed", seed, "--out", d) == 0
        data = load_csv(d / "synthetic.csv", CsvSchema("time", "event"))
        write_csv(data.subset(np.arange(200)), d / "tr.csv")
        write_csv(data.subset(np.arange(200, 400)), d / "te.csv")
        assert run("fit", "--train", d / "tr.csv", "--arch", "basic", "--no-cv", "--epochs", 2, "--out", d) == 0
        assert run("evaluate", "--model", d / "model.json", "--test", d / "te.csv", "--reps", 20, "--out", d) == 0
        rep = json.loads((d / "report.json").read_text())
        wins += rep["ctd"]["ctd"] >= rep["ctd_marginal_km"]["ctd"]
        assert rep["ctd_marginal_km"]["ctd"] == 0.5
    assert wins >= 4


def test_evaluate_errors(workspace, tmp_path):
    (tmp_path / "bad.csv").write_text("time,event,x1\n1,1,0.5\n")
    assert run("evaluate", "--model", workspace / "fit" / "model.json", "--test", tmp_path / "bad.csv",
               "--out", tmp_path) == 2
    assert run("evaluate", "--model", tmp_path / "missing.json", "--test", workspace / "test.csv",
               "--out", tmp_path) == 2


def test_manifest_records_inputs(workspace, tmp_path):
    assert run("predict", "--model", workspace / "fit" / "model.json", "--query", workspace / "small.csv",
               "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert set(m["inputs"]) == {"model", "query"}
    assert m["command"] == "predict" and m["config"]["seed"] == 0
    assert len(m["inputs"]["model"]["sha256"]) == 64
