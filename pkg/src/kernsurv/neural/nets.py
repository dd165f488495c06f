"""Embedding networks psi: R^d -> R^p with explicit reverse-mode gradients.

Every layer exposes ``forward(x, train) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)`` where ``grads`` lines up with
``params()``. Batch-norm running statistics are buffers, not parameters,
and are only updated by an explicit :meth:`EmbeddingNet.update_buffers`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Linear:
    def __init__(self, n_in: int, n_out: int, rng=None, bound: float | None = None, zero: bool = False):
        self.W = np.zeros((n_out, n_in))
        self.b = np.zeros(n_out)
        if not zero:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = np.sqrt(6.0 / n_in) if bound is None else bound
            self.W = rng.uniform(-bound, bound, size=(n_out, n_in))

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train):
        return x @ self.W.T + self.b, x

    def backward(self, dy, x):
        return dy @ self.W, [dy.T @ x, dy.sum(axis=0)]


class ReLU:
    def params(self):
        return []

    def forward(self, x, train):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, mask):
        return dy * mask, []


class BatchNorm:
    def __init__(self, n: int):
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        return self.gamma * xhat + self.beta, (train, xhat, inv, x)

    def backward(self, dy, cache):
        train, xhat, inv, _ = cache
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * self.gamma
        if train:
            n = len(dy)
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, [dgamma, dbeta]

    def update(self, cache):
        train, _, _, x = cache
        if not train:
            return
        n = len(x)
        unbiased = x.var(axis=0, ddof=1) if n > 1 else np.zeros(x.shape[1])
        self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * x.mean(axis=0)
        self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * unbiased

    def buffers(self):
        return {"running_mean": self.running_mean.tolist(), "running_var": self.running_var.tolist()}

    def load_buffers(self, d):
        self.running_mean = np.asarray(d["running_mean"], float)
        self.running_var = np.asarray(d["running_var"], float)


class Scale:
    """Elementwise scaling x * w with a scalar (basic) or per-feature (diag) weight."""

    def __init__(self, dim: int, diagonal: bool):
        self.diagonal = diagonal
        self.w = np.ones(dim if diagonal else 1)

    def params(self):
        return [self.w]

    def forward(self, x, train):
        return x * self.w, x

    def backward(self, dy, x):
        g = (dy * x).sum(axis=0)
        return dy * self.w, [g if self.diagonal else np.array([g.sum()])]


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        grads = []
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(dy, c)
            grads = g + grads
        return dy, grads

    def norms(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def update(self, caches):
        for layer, c in zip(self.layers, caches):
            if isinstance(layer, BatchNorm):
                layer.update(c)


@dataclass(frozen=True)
class MLPSpec:
    hidden_layers: int = 2
    hidden_width: int = 32

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("MLP needs positive depth and width")


def build_mlp(d_in: int, d_out: int, spec: MLPSpec, rng, zero_last: bool = False) -> Sequential:
    """Hidden blocks Linear -> ReLU -> BatchNorm, then a linear output layer."""
    layers = []
    width = d_in
    for _ in range(spec.hidden_layers):
        layers += [Linear(width, spec.hidden_width, rng), ReLU(), BatchNorm(spec.hidden_width)]
        width = spec.hidden_width
    layers.append(Linear(width, d_out, rng, bound=np.sqrt(3.0 / width), zero=zero_last))
    return Sequential(layers)


class EmbeddingNet:
    """A parameterized map psi with flat-vector parameter access.

    Construct through :func:`basic`, :func:`diag`, :func:`mlp` or :func:`residual`.
    """

    def __init__(self, arch: str, input_dim: int, output_dim: int, body: Sequential,
                 inner: Sequential | None = None, lam: float = 0.0, mlp_spec: MLPSpec | None = None):
        self.arch = arch
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.body = body
        self.inner = inner
        self.lam = float(lam)
        self.mlp_spec = mlp_spec

    def _modules(self):
        return [self.inner, self.body] if self.inner is not None else [self.body]

    def param_list(self):
        return [p for mod in self._modules() for p in mod.params()]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.param_list())

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.param_list()])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        k = 0
        for p in self.param_list():
            p[...] = flat[k:k + p.size].reshape(p.shape)
            k += p.size

    def copy(self) -> "EmbeddingNet":
        return copy.deepcopy(self)

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] != self.input_dim:
            raise ValueError(f"net expects {self.input_dim} features, got {X.shape[1]}")
        return X

    def forward_cached(self, X, train: bool):
        X = self._check(X)
        if self.inner is None:
            Z, c = self.body.forward(X, train)
            return Z, (c,)
        phi, ci = self.inner.forward(X, train)
        Z, cb = self.body.forward(X + self.lam * phi, train)
        return Z, (ci, cb)

    def forward(self, X, train: bool = False) -> np.ndarray:
        return self.forward_cached(X, train)[0]

    def backward(self, dZ, cache) -> np.ndarray:
        """Flat parameter gradient given dL/dZ."""
        if self.inner is None:
            _, g = self.body.backward(dZ, cache[0])
            return _flatten(g)
        dU, gb = self.body.backward(dZ, cache[1])
        _, gi = self.inner.backward(self.lam * dU, cache[0])
        return _flatten(gi + gb)

    def update_buffers(self, cache) -> None:
        for mod, c in zip(self._modules(), cache):
            mod.update(c)

    def norm_layers(self):
        return [bn for mod in self._modules() for bn in mod.norms()]

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "lambda": self.lam,
            "hidden_layers": self.mlp_spec.hidden_layers if self.mlp_spec else None,
            "hidden_width": self.mlp_spec.hidden_width if self.mlp_spec else None,
            "params": self.get_params().tolist(),
            "batchnorm": [bn.buffers() for bn in self.norm_layers()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingNet":
        spec = MLPSpec(d["hidden_layers"], d["hidden_width"]) if d.get("hidden_layers") else None
        net = build(d["arch"], d["input_dim"], mlp_spec=spec, lam=d.get("lambda") or 0.1)
        net.set_params(d["params"])
        for bn, buf in zip(net.norm_layers(), d.get("batchnorm", [])):
            bn.load_buffers(buf)
        return net

    def __repr__(self):
        return f"EmbeddingNet(arch={self.arch!r}, input_dim={self.input_dim}, n_params={self.n_params})"


def _flatten(grads) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])


def basic(d: int) -> EmbeddingNet:
    return EmbeddingNet("basic", d, d, Sequential([Scale(d, diagonal=False)]))


def diag(d: int) -> EmbeddingNet:
    return EmbeddingNet("diag", d, d, Sequential([Scale(d, diagonal=True)]))


def mlp(d: int, spec: MLPSpec = MLPSpec(), seed: int = 0) -> EmbeddingNet:
    rng = np.random.default_rng(seed)
    return EmbeddingNet("mlp", d, d, build_mlp(d, d, spec, rng), mlp_spec=spec)


def residual(d: int, outer: str = "basic", spec: MLPSpec = MLPSpec(), lam: float = 0.1,
             seed: int = 0) -> EmbeddingNet:
    """psi(x) = xi(x + lam * phi(x)); phi's output layer starts at zero so psi starts as xi."""
    if outer not in ("basic", "diag"):
        raise ValueError("residual outer map must be basic or diag")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    rng = np.random.default_rng(seed)
    inner = build_mlp(d, d, spec, rng, zero_last=True)
    body = Sequential([Scale(d, diagonal=outer == "diag")])
    return EmbeddingNet(f"res-{outer}", d, d, body, inner=inner, lam=lam, mlp_spec=spec)


ARCHITECTURES = ("basic", "diag", "res-basic", "res-diag", "mlp")


def build(arch: str, d: int, mlp_spec: MLPSpec | None = None, lam: float = 0.1, seed: int = 0) -> EmbeddingNet:
    spec = mlp_spec or MLPSpec()
    if arch == "basic":
        return basic(d)
    if arch == "diag":
        return diag(d)
    if arch == "mlp":
        return mlp(d, spec, seed)
    if arch in ("res-basic", "res-diag"):
        return residual(d, arch[4:], spec, lam, seed)
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
