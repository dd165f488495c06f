"""Classical MDS of a kernel matrix, for warm-starting an embedding network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..kernel import KernelError, KernelMatrix, PrecomputedKernel

GUARD = 1e-6


@dataclass(frozen=True, eq=False)
class MDSResult:
    coords: np.ndarray
    eigenvalues: np.ndarray
    stress: float


def target_sq_distances(K, guard: float = GUARD) -> np.ndarray:
    """Squared distances log(1/K) implied by exp(-||a - b||^2) = K.

    Entries are floored at ``guard`` so zeros stay finite; the diagonal is 0.
    """
    K = np.asarray(K, float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise KernelError(f"kernel matrix must be square, got shape {K.shape}")
    Kg = np.maximum(K, guard)
    if np.any(Kg <= 0):
        raise KernelError("kernel matrix has zero entries after the guard")
    D2 = np.maximum(-np.log(Kg), 0.0)
    np.fill_diagonal(D2, 0.0)
    return D2


def mds_embed(matrix, dim: int, guard: float = GUARD) -> MDSResult:
    """Embed so that ||x_i - x_j|| approximates sqrt(log(1/K_ij))."""
    if isinstance(matrix, KernelMatrix):
        matrix = matrix.values
    elif isinstance(matrix, PrecomputedKernel):
        matrix = matrix.matrix
    D2 = target_sq_distances(matrix, guard)
    n = len(D2)
    if not 1 <= dim <= n:
        raise KernelError(f"embedding dimension must be in [1, {n}], got {dim}")
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ D2 @ J
    B = 0.5 * (B + B.T)
    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1][:dim]
    lam = np.clip(evals[order], 0.0, None)
    coords = evecs[:, order] * np.sqrt(lam)
    target = np.sqrt(D2)
    got = np.sqrt(np.maximum(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1), 0.0))
    den = np.sum(target**2)
    stress = float(np.sqrt(np.sum((got - target) ** 2) / den)) if den > 0 else 0.0
    return MDSResult(coords, lam, stress)
