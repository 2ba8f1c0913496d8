"""Dense-matrix oracles for small grids.

Everything here materializes ``n^d x n^d`` matrices, so it is guarded to
``n^d <= 4096`` and used only to cross-check the low-rank algebra.
"""
from __future__ import annotations

import numpy as np

from .grid import Grid, apply_symbol, to_fft_order
from .operators import LowRankOperator

MAX_DENSE = 4096


def _guard(grid: Grid) -> None:
    if grid.size > MAX_DENSE:
        raise ValueError(f"dense materialization refused for {grid.size} > {MAX_DENSE} points")


def materialize_dense(A: LowRankOperator) -> np.ndarray:
    """Kernel matrix ``K[i, j] = A(x_i, x_j)``."""
    _guard(A.grid)
    L = A.left.reshape(A.left.shape[0], -1)
    R = A.right.reshape(A.right.shape[0], -1)
    return L.T @ A.coef @ R.conj()


def operator_matrix(A: LowRankOperator) -> np.ndarray:
    """Matrix of ``A`` in the orthonormal point basis (kernel times dx^d)."""
    return A.grid.cell * materialize_dense(A)


def multiplier_matrix(grid: Grid, symbol_sorted: np.ndarray) -> np.ndarray:
    _guard(grid)
    eye = np.eye(grid.size, dtype=complex).reshape((grid.size,) + grid.shape)
    cols = apply_symbol(eye, to_fft_order(symbol_sorted, grid), grid)
    return cols.reshape(grid.size, grid.size).T


def derivative_matrix(grid: Grid, axis: int) -> np.ndarray:
    _guard(grid)
    eye = np.eye(grid.size, dtype=complex).reshape((grid.size,) + grid.shape)
    cols = apply_symbol(eye, grid.derivative_symbols()[axis], grid)
    return cols.reshape(grid.size, grid.size).T


def position_matrix(grid: Grid, axis: int) -> np.ndarray:
    return np.diag(np.broadcast_to(grid.coords()[axis], grid.shape).reshape(-1)).astype(complex)


def dense_schatten(M: np.ndarray, r: float, scale: float) -> float:
    """Scaled Schatten norm of an operator matrix; ``scale = (2 pi hbar)^d``."""
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0.0
    s = np.where(s < 1e-14 * s[0], 0.0, s)
    if np.isinf(r):
        return float(s[0])
    return float(scale ** (1 / r) * np.sum(s**r) ** (1 / r))
