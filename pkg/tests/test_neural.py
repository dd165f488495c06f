import math

import numpy as np
import pytest

import oracles
from kernsurv.data import DataError, SurvivalDataset, SyntheticSpec, TimeGrid, build_time_grid, generate_synthetic
from kernsurv.neural import (
    HAZARD_CLAMP,
    MLPSpec,
    TrainConfig,
    basic,
    build,
    diag,
    loss_gradient,
    mds_embed,
    mlp,
    residual,
    survival_loss,
    train,
    warm_start,
    warm_start_mse,
)
from kernsurv.neural.model import KernelSurvivalModel
from kernsurv.neural.nets import EmbeddingNet
from kernsurv.neural.train import Adam, batches, prepare


@pytest.fixture(scope="module")
def clusters():
    data, _ = generate_synthetic(SyntheticSpec(n=200, d=2, hazard_model="clusters", censoring_rate_target=0.3,
                                               seed=21))
    return prepare(data, 32)


def fd_gradient(net, batch, grid, step=1e-5):
    p = net.get_params()
    out = np.empty_like(p)
    for k in range(p.size):
        q = p.copy()
        q[k] += step
        net.set_params(q)
        up = survival_loss(net, batch, grid).value
        q[k] -= 2 * step
        net.set_params(q)
        out[k] = (up - survival_loss(net, batch, grid).value) / (2 * step)
    net.set_params(p)
    return out


# ---------------------------------------------------------------- forward


def test_forward_examples():
    x = np.array([[3.0, 5.0], [-1.0, 2.0]])
    np.testing.assert_array_equal(basic(2).forward(x), x)
    net = diag(2)
    net.set_params([2.0, 0.0])
    np.testing.assert_array_equal(net.forward([[3.0, 5.0]]), [[6.0, 0.0]])
    for outer in ("basic", "diag"):
        r = residual(2, outer, MLPSpec(2, 16), lam=0.7, seed=3)
        np.testing.assert_array_equal(r.forward(x), x)


def test_forward_shapes_and_errors():
    for arch in ("basic", "diag", "res-basic", "res-diag", "mlp"):
        net = build(arch, 4, MLPSpec(1, 8), seed=0)
        Z = net.forward(np.random.default_rng(0).standard_normal((7, 4)))
        assert Z.shape == (7, 4) and np.all(np.isfinite(Z))
        with pytest.raises(ValueError):
            net.forward(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        build("cnn", 2)
    with pytest.raises(ValueError):
        residual(2, lam=0.0)


def test_mlp_structure():
    spec = MLPSpec(hidden_layers=4, hidden_width=16)
    net = mlp(3, spec, seed=0)
    kinds = [type(layer).__name__ for layer in net.body.layers]
    assert kinds == ["Linear", "ReLU", "BatchNorm"] * 4 + ["Linear"]
    assert net.output_dim == 3
    with pytest.raises(ValueError):
        MLPSpec(0, 16)


def test_params_round_trip_and_serialization():
    net = residual(3, "diag", MLPSpec(2, 8), seed=4)
    p = np.random.default_rng(0).standard_normal(net.n_params)
    net.set_params(p)
    np.testing.assert_array_equal(net.get_params(), p)
    back = EmbeddingNet.from_dict(net.to_dict())
    X = np.random.default_rng(1).standard_normal((5, 3))
    np.testing.assert_array_equal(back.forward(X), net.forward(X))
    with pytest.raises(ValueError):
        net.set_params(p[:-1])


def test_batchnorm_running_statistics():
    net = mlp(2, MLPSpec(1, 4), seed=0)
    X = np.random.default_rng(0).normal(5.0, 3.0, (64, 2))
    before = net.forward(X, train=False)
    _, cache = net.forward_cached(X, train=True)
    net.update_buffers(cache)
    after = net.forward(X, train=False)
    assert not np.allclose(before, after)
    # evaluation mode is deterministic and row-independent
    np.testing.assert_allclose(net.forward(X[:3]), net.forward(X)[:3], rtol=1e-14)


# ---------------------------------------------------------------- loss


def test_loss_matches_oracle(clusters):
    data, grid = clusters
    rng = np.random.default_rng(0)
    for _ in range(10):
        idx = rng.choice(len(data), size=int(rng.integers(2, 33)), replace=False)
        batch = data.subset(idx)
        net = diag(2)
        w = rng.uniform(-1.5, 1.5, 2)
        net.set_params(w)
        ref = oracles.loo_loss((batch.features * w).tolist(), batch.times.tolist(), batch.events.tolist(),
                               grid.times.tolist())
        assert survival_loss(net, batch, grid).value == pytest.approx(ref, abs=1e-10)


def test_loss_high_precision_reference(clusters):
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    data, grid = clusters
    batch = data.subset(np.arange(12))
    net = residual(2, "diag", MLPSpec(2, 8), seed=3)
    p = net.get_params()
    net.set_params(p + 0.3 * np.random.default_rng(0).standard_normal(p.size))
    Z = net.forward(batch.features, train=True)
    Y, D, G = batch.times.tolist(), batch.events.tolist(), grid.times.tolist()
    total = mp.mpf(0)
    for i in range(len(Z)):
        for t in G:
            if t > Y[i]:
                break
            d = n = mp.mpf(0)
            for j in range(len(Z)):
                if j != i and Y[j] >= t:
                    k = mp.e ** (-sum((mp.mpf(a) - mp.mpf(b)) ** 2 for a, b in zip(Z[i], Z[j])))
                    n += k
                    if Y[j] == t and D[j] == 1:
                        d += k
            h = min(max(d / (n + mp.mpf(1e-12)), mp.mpf(HAZARD_CLAMP)), 1 - mp.mpf(HAZARD_CLAMP))
            total += mp.log(h) if (t == Y[i] and D[i] == 1) else mp.log(1 - h)
    assert abs(survival_loss(net, batch, grid).value - float(-total / len(Z))) <= 1e-13


def test_loss_two_subjects():
    batch = SurvivalDataset([[0.0], [1.0]], [1.0, 2.0], [1, 1])
    grid = TimeGrid([1.0, 2.0])
    net = basic(1)
    got = survival_loss(net, batch, grid).value
    ref = oracles.loo_loss([[0.0], [1.0]], [1.0, 2.0], [1, 1], [1.0, 2.0])
    assert got == pytest.approx(ref, abs=1e-12)
    # every term sits at the clamp: the death at 1 has no weighted deaths, the survivor at 1 sees its only
    # neighbor die, and nobody else is at risk at 2
    assert got == pytest.approx(-3 * math.log(HAZARD_CLAMP) / 2, rel=1e-12)


def test_loss_constant_kernel_limit(clusters):
    data, grid = clusters
    batch = data.subset(np.arange(20))
    net = basic(2)
    net.set_params([0.0])
    # all embeddings coincide: unweighted leave-one-out counts
    ref = oracles.loo_loss(np.zeros((20, 2)).tolist(), batch.times.tolist(), batch.events.tolist(),
                           grid.times.tolist())
    assert survival_loss(net, batch, grid).value == pytest.approx(ref, abs=1e-12)


def test_loss_permutation_invariance(clusters):
    data, grid = clusters
    batch = data.subset(np.arange(30))
    net = mlp(2, MLPSpec(2, 8), seed=2)
    perm = np.random.default_rng(0).permutation(30)
    a = survival_loss(net, batch, grid).value
    b = survival_loss(net, batch.subset(perm), grid).value
    assert abs(a - b) <= 1e-12


def test_loss_preconditions(clusters):
    data, grid = clusters
    with pytest.raises(DataError):
        survival_loss(basic(2), data.subset([0]), grid)
    off = SurvivalDataset(np.zeros((2, 2)), [0.123456, 0.5], [1, 1])
    with pytest.raises(DataError):
        survival_loss(basic(2), off, grid)


def test_loss_nonnegative(clusters):
    data, grid = clusters
    for arch in ("basic", "mlp"):
        assert survival_loss(build(arch, 2), data.subset(np.arange(40)), grid).value >= 0


# ---------------------------------------------------------------- gradient


@pytest.mark.parametrize("arch", ["basic", "diag"])
def test_gradient_finite_differences_16(clusters, arch):
    data, grid = clusters
    batch = data.subset(np.arange(16))
    net = build(arch, 2)
    if arch == "diag":
        net.set_params([0.8, 1.3])
    g = loss_gradient(net, batch, grid)
    fd = fd_gradient(net, batch, grid)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-9)


def test_gradient_zero_for_identical_subjects():
    batch = SurvivalDataset(np.ones((5, 2)), np.full(5, 2.0), np.ones(5, int))
    grid = TimeGrid([1.0, 2.0])
    assert loss_gradient(basic(2), batch, grid)[0] == 0.0


def test_gradient_zero_when_clamped_everywhere():
    # subjects so far apart that every leave-one-out hazard is 0 (clamped) or undefined
    X = np.arange(6.0)[:, None] * 1e3
    batch = SurvivalDataset(X, np.arange(1.0, 7.0), np.ones(6, int))
    grid = TimeGrid(np.arange(1.0, 7.0))
    net = mlp(1, MLPSpec(1, 4), seed=0)
    np.testing.assert_array_equal(loss_gradient(basic(1), batch, grid), 0.0)
    assert np.all(np.isfinite(loss_gradient(net, batch, grid)))


# ---------------------------------------------------------------- training


def test_adam_first_step():
    opt = Adam(2, lr=0.1)
    p = opt.step(np.zeros(2), np.array([1.0, -4.0]))
    # bias-corrected first step moves each coordinate by lr against the gradient sign
    np.testing.assert_allclose(p, [-0.1, 0.1], rtol=1e-6)


def test_batches_keep_and_drop_tail():
    rng = np.random.default_rng(0)
    sizes = [len(b) for b in batches(10, 4, rng, min_size=2)]
    assert sizes == [4, 4, 2]
    sizes = [len(b) for b in batches(9, 4, np.random.default_rng(0), min_size=2)]
    assert sizes == [4, 4]


def test_training_descends_on_clusters(clusters):
    data, grid = clusters
    net = basic(2)
    before = survival_loss(net, data, grid, train=False).value
    trained, hist = train(net, data, TrainConfig(epochs=10, batch_size=64, seed=0), grid)
    after = survival_loss(trained, data, grid, train=False).value
    assert after <= before
    assert len(hist) == 10
    # the input net is left untouched
    assert net.get_params()[0] == 1.0


def test_training_zero_learning_rate(clusters):
    data, grid = clusters
    net = diag(2)
    trained, hist = train(net, data, TrainConfig(epochs=3, batch_size=len(data), learning_rate=0.0), grid)
    np.testing.assert_array_equal(trained.get_params(), net.get_params())
    # the batch is reshuffled each epoch, so losses agree up to summation order
    assert hist[1] == pytest.approx(hist[0], rel=1e-12) and hist[2] == pytest.approx(hist[0], rel=1e-12)


def test_training_deterministic(clusters):
    data, grid = clusters
    cfg = TrainConfig(epochs=3, batch_size=64, seed=5)
    a, ha = train(mlp(2, MLPSpec(1, 8), seed=1), data, cfg, grid)
    b, hb = train(mlp(2, MLPSpec(1, 8), seed=1), data, cfg, grid)
    np.testing.assert_array_equal(a.get_params(), b.get_params())
    assert ha == hb


def test_training_errors():
    with pytest.raises(DataError):
        train(basic(1), SurvivalDataset(np.zeros((0, 1)), [], []), TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- MDS / warm start


def test_mds_all_ones():
    res = mds_embed(np.ones((5, 5)), 2)
    assert np.max(np.abs(res.coords - res.coords[0])) < 1e-9


def test_mds_two_points():
    e = math.exp(-1.0)
    res = mds_embed(np.array([[1.0, e], [e, 1.0]]), 1)
    assert abs(np.linalg.norm(res.coords[0] - res.coords[1]) - 1.0) <= 1e-6
    assert res.stress < 1e-12


def test_mds_round_trip():
    rng = np.random.default_rng(0)
    P = rng.uniform(0, 1, (25, 2))
    D2 = ((P[:, None] - P[None]) ** 2).sum(-1)
    res = mds_embed(np.exp(-D2), 2)
    got = ((res.coords[:, None] - res.coords[None]) ** 2).sum(-1)
    np.testing.assert_allclose(np.sqrt(got), np.sqrt(D2), atol=1e-6)


def test_mds_errors():
    with pytest.raises(ValueError):
        mds_embed(np.ones((3, 3)), 4)
    with pytest.raises(ValueError):
        mds_embed(np.ones((3, 2)), 1)


def test_warm_start_least_squares():
    data = SurvivalDataset([[1.0], [2.0]], [1.0, 2.0], [1, 1])
    net, _ = warm_start(basic(1), data, [[2.0], [4.0]], TrainConfig(epochs=1000, batch_size=2))
    assert abs(net.get_params()[0] - 2.0) <= 1e-2


def test_warm_start_already_fit():
    data = SurvivalDataset([[1.0], [2.0]], [1.0, 2.0], [1, 1])
    net = basic(1)
    targets = net.forward(data.features)
    assert warm_start_mse(net, data, targets) == 0.0
    fitted, hist = warm_start(net, data, targets, TrainConfig(epochs=5, learning_rate=0.0))
    np.testing.assert_array_equal(fitted.get_params(), net.get_params())
    assert hist == [0.0] * 5


def test_warm_start_mlp_reduces_mse():
    rng = np.random.default_rng(0)
    data = SurvivalDataset(rng.standard_normal((50, 3)), np.ones(50), np.ones(50, int))
    targets = rng.standard_normal((50, 3))
    net = mlp(3, MLPSpec(2, 32), seed=0)
    start = warm_start_mse(net, data, targets)
    fitted, _ = warm_start(net, data, targets, TrainConfig(epochs=200, batch_size=64))
    assert warm_start_mse(fitted, data, targets) <= 0.1 * start


def test_warm_start_shape_check():
    data = SurvivalDataset([[1.0], [2.0]], [1.0, 2.0], [1, 1])
    with pytest.raises(ValueError):
        warm_start(basic(1), data, [[1.0, 2.0]], TrainConfig())


# ---------------------------------------------------------------- model file


def test_model_save_load(tmp_path, clusters):
    data, _ = clusters
    model = KernelSurvivalModel.fit(residual(2, "basic", MLPSpec(1, 8), seed=0), data,
                                    TrainConfig(epochs=2, batch_size=64, grid_points=16))
    model.save(tmp_path / "m.json")
    back = KernelSurvivalModel.load(tmp_path / "m.json")
    X = data.features[:10]
    np.testing.assert_array_equal(back.predict_survival(X), model.predict_survival(X))
    np.testing.assert_array_equal(back.grid.times, model.grid.times)
    assert back.history == model.history


def test_model_grid_uses_all_times_by_default():
    data, _ = generate_synthetic(SyntheticSpec(n=40, d=2, censoring_rate_target=0.2, seed=0))
    model = KernelSurvivalModel.fit(basic(2), data, TrainConfig(epochs=1, batch_size=16))
    np.testing.assert_array_equal(model.grid.times, build_time_grid(data).times)
