"""Similarity kernels K(x, x') >= 0 used by the conditional Kaplan-Meier estimator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .data import SurvivalDataset


class KernelError(ValueError):
    pass


def _as_rows(x) -> np.ndarray:
    if isinstance(x, SurvivalDataset):
        return x.features
    x = np.asarray(x, dtype=float)
    return x.reshape(1, -1) if x.ndim == 1 else x


class Kernel:
    """Base class. Subclasses implement :meth:`gram` on 2-d feature arrays."""

    input_dim: int | None = None

    def gram(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, A, B):
        A, B = _as_rows(A), _as_rows(B)
        if A.shape[1] != B.shape[1]:
            raise KernelError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
        if self.input_dim is not None and A.shape[1] != self.input_dim:
            raise KernelError(f"kernel expects {self.input_dim} features, got {A.shape[1]}")
        return A, B

    def __call__(self, x, x2) -> float:
        return evaluate(self, x, x2)


class ConstantKernel(Kernel):
    def gram(self, A, B):
        A, B = self._check(A, B)
        return np.ones((len(A), len(B)))

    def __repr__(self):
        return "ConstantKernel()"


class BoxKernel(Kernel):
    """K(x, x') = 1{||x - x'|| <= sigma}."""

    def __init__(self, sigma: float):
        if not sigma > 0:
            raise KernelError("box kernel needs sigma > 0")
        self.sigma = float(sigma)

    def gram(self, A, B):
        A, B = self._check(A, B)
        return (cdist(A, B) <= self.sigma).astype(float)

    def __repr__(self):
        return f"BoxKernel(sigma={self.sigma})"


class GaussianEmbeddingKernel(Kernel):
    """K(x, x') = exp(-||psi(x) - psi(x')||^2), psi evaluated in eval mode."""

    def __init__(self, net):
        self.net = net
        self.input_dim = net.input_dim

    def embed(self, X) -> np.ndarray:
        return self.net.forward(_as_rows(X), train=False)

    def gram(self, A, B):
        A, B = self._check(A, B)
        return self.gram_embedded(self.embed(A), self.embed(B))

    @staticmethod
    def gram_embedded(ZA, ZB) -> np.ndarray:
        return np.exp(-cdist(ZA, ZB, "sqeuclidean"))

    def __repr__(self):
        return f"GaussianEmbeddingKernel({self.net!r})"


class PrecomputedKernel(Kernel):
    """Stored n x n matrix over indexed points.

    Points are identified by exact feature-vector match against ``points``;
    anything else is an error.
    """

    def __init__(self, matrix, points=None):
        matrix = np.asarray(matrix, dtype=float)
        _validate_matrix(matrix)
        self.matrix = matrix
        self.points = None
        self._index: dict[bytes, int] = {}
        if points is not None:
            self.set_points(points)

    def set_points(self, points) -> "PrecomputedKernel":
        P = _as_rows(points)
        if len(P) != len(self.matrix):
            raise KernelError(f"{len(P)} index points for a {len(self.matrix)}-row kernel matrix")
        self.points = P
        self.input_dim = P.shape[1]
        self._index = {}
        for i, row in enumerate(P):
            self._index.setdefault(np.ascontiguousarray(row).tobytes(), i)
        return self

    def index_of(self, X) -> np.ndarray:
        X = _as_rows(X)
        if self.points is None:
            raise KernelError("precomputed kernel has no index points")
        out = np.empty(len(X), dtype=int)
        for k, row in enumerate(X):
            i = self._index.get(np.ascontiguousarray(row, dtype=float).tobytes())
            if i is None:
                raise KernelError("point is not indexed by the precomputed kernel")
            out[k] = i
        return out

    def gram(self, A, B):
        A, B = self._check(A, B)
        return self.matrix[np.ix_(self.index_of(A), self.index_of(B))]

    def entry(self, i: int, j: int) -> float:
        return float(self.matrix[i, j])

    def __repr__(self):
        return f"PrecomputedKernel(n={len(self.matrix)})"


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    values: np.ndarray
    rows: str = "rows"
    cols: str = "cols"

    @property
    def shape(self):
        return self.values.shape


def evaluate(kernel: Kernel, x, x2) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise KernelError(f"dimension mismatch: {x.size} vs {x2.size}")
    return float(kernel.gram(x[None, :], x2[None, :])[0, 0])


def matrix(kernel: Kernel, rows, cols, rows_label="rows", cols_label="cols") -> KernelMatrix:
    return KernelMatrix(kernel.gram(_as_rows(rows), _as_rows(cols)), rows_label, cols_label)


def _validate_matrix(K: np.ndarray, tol: float = 1e-9) -> None:
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise KernelError(f"kernel matrix must be square, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise KernelError("kernel matrix has non-finite entries")
    bad = np.argwhere((K < 0) | (K > 1))
    if bad.size:
        i, j = bad[0]
        raise KernelError(f"kernel matrix entry ({i}, {j}) = {K[i, j]} outside [0, 1]")
    if np.max(np.abs(K - K.T), initial=0.0) > tol:
        raise KernelError("kernel matrix is not symmetric")


def load_kernel_matrix(path, points=None) -> PrecomputedKernel:
    """Read a headerless square CSV of kernel values in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise KernelError(f"no such file: {path}")
    try:
        K = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise KernelError(f"{path}: {exc}") from None
    return PrecomputedKernel(K, points)


def parse_kernel(spec: str, net=None, points=None) -> Kernel:
    """Build a kernel from ``learned``, ``constant``, ``box:SIGMA`` or ``precomputed:PATH``."""
    name, _, arg = spec.partition(":")
    if name == "learned":
        if net is None:
            raise KernelError("the learned kernel needs a fitted model")
        return GaussianEmbeddingKernel(net)
    if name == "constant":
        return ConstantKernel()
    if name == "box":
        return BoxKernel(float(arg))
    if name == "precomputed":
        return load_kernel_matrix(arg, points)
    raise KernelError(f"unknown kernel {spec!r}")
