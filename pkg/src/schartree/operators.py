"""Finite-rank density operators on a periodic grid.

An operator is stored as ``A = sum_{jk} C_jk |f_j><g_k|`` where the bra uses
the quadrature inner product ``<g, u> = dx^d sum conj(g) u``.  Its kernel is
therefore ``A(x, x') = sum C_jk f_j(x) conj(g_k(x'))`` and acting on a vector
multiplies by ``dx^d`` once.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable

import numpy as np
import scipy.linalg as sla

from .grid import (
    POSITION,
    Field,
    Grid,
    apply_symbol,
    read_field,
    to_fft_order,
    write_field,
)

SV_CUTOFF = 1e-14


@dataclass(frozen=True)
class LowRankOperator:
    grid: Grid
    hbar: float
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    coef: np.ndarray = field(repr=False)
    hermitian: bool = False

    def __post_init__(self):
        g = self.grid
        left = np.asarray(self.left, dtype=complex).reshape((-1,) + g.shape)
        right = np.asarray(self.right, dtype=complex).reshape((-1,) + g.shape)
        coef = np.asarray(self.coef, dtype=complex).reshape(left.shape[0], right.shape[0])
        if not 0 < self.hbar <= 1:
            raise ValueError(f"hbar must lie in (0, 1], got {self.hbar}")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "coef", coef)

    # -- constructors -------------------------------------------------------
    @classmethod
    def zero(cls, grid: Grid, hbar: float) -> "LowRankOperator":
        z = np.zeros((0,) + grid.shape, dtype=complex)
        return cls(grid, hbar, z, z, np.zeros((0, 0)), True)

    @classmethod
    def rank_one(cls, u, v=None, hbar: float = 1.0, scale: complex = 1.0) -> "LowRankOperator":
        """``scale * |u><v|`` (``v`` defaults to ``u``, giving a hermitian operator for real scale)."""
        uf = u if isinstance(u, Field) else None
        grid = uf.grid if uf is not None else v.grid
        uval = u.values if isinstance(u, Field) else np.asarray(u)
        herm = v is None and np.isreal(scale)
        vval = uval if v is None else (v.values if isinstance(v, Field) else np.asarray(v))
        return cls(grid, hbar, uval[None], vval[None], np.array([[scale]]), bool(herm))

    @classmethod
    def from_orbitals(cls, grid: Grid, hbar: float, orbitals: np.ndarray, weights) -> "LowRankOperator":
        """Hermitian ``sum_n a_n |u_n><u_n|``."""
        orbitals = np.asarray(orbitals, dtype=complex).reshape((-1,) + grid.shape)
        w = np.asarray(weights, dtype=float)
        return cls(grid, hbar, orbitals, orbitals, np.diag(w).astype(complex), True)

    # -- basic algebra --------------------------------------------------------
    @property
    def rank_bound(self) -> int:
        return self.left.shape[0]

    @property
    def scale(self) -> float:
        """(2 pi hbar)^d."""
        return (2 * np.pi * self.hbar) ** self.grid.d

    def _flat(self, which: np.ndarray) -> np.ndarray:
        return which.reshape(which.shape[0], -1)

    def with_factors(self, left, right, coef, hermitian: bool | None = None) -> "LowRankOperator":
        return LowRankOperator(self.grid, self.hbar, left, right, coef,
                               self.hermitian if hermitian is None else hermitian)

    def scaled(self, c: complex) -> "LowRankOperator":
        return self.with_factors(self.left, self.right, c * self.coef,
                                 self.hermitian and np.isreal(c))

    def adjoint(self) -> "LowRankOperator":
        return self.with_factors(self.right, self.left, self.coef.conj().T)

    def __add__(self, other: "LowRankOperator") -> "LowRankOperator":
        _check_same(self, other)
        k1, k2 = self.rank_bound, other.rank_bound
        C = np.zeros((k1 + k2, self.right.shape[0] + other.right.shape[0]), dtype=complex)
        C[:k1, : self.right.shape[0]] = self.coef
        C[k1:, self.right.shape[0]:] = other.coef
        return self.with_factors(np.concatenate([self.left, other.left]),
                                 np.concatenate([self.right, other.right]), C,
                                 self.hermitian and other.hermitian)

    def __sub__(self, other: "LowRankOperator") -> "LowRankOperator":
        return self + other.scaled(-1.0)

    def __matmul__(self, other: "LowRankOperator") -> "LowRankOperator":
        _check_same(self, other)
        M = self.grid.cell * (self._flat(self.right).conj() @ self._flat(other.left).T)
        return self.with_factors(self.left, other.right, self.coef @ M @ other.coef, False)

    def map_factors(self, left_fn: Callable[[np.ndarray], np.ndarray],
                    right_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                    hermitian: bool | None = None) -> "LowRankOperator":
        """Replace ``f_j -> left_fn(f_j)`` and ``g_k -> right_fn(g_k)`` (batched over the first axis)."""
        right_fn = left_fn if right_fn is None else right_fn
        herm = self.hermitian and right_fn is left_fn if hermitian is None else hermitian
        return self.with_factors(left_fn(self.left), right_fn(self.right), self.coef, herm)

    def conjugate_by(self, unitary: Callable[[np.ndarray], np.ndarray]) -> "LowRankOperator":
        """``U A U*`` for a unitary given by its action on vectors."""
        return self.map_factors(unitary, unitary, hermitian=self.hermitian)

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=complex).reshape(-1)
        inner = self.grid.cell * (self._flat(self.right).conj() @ u)
        return (self._flat(self.left).T @ (self.coef @ inner)).reshape(self.grid.shape)

    def trace(self) -> complex:
        M = self.grid.cell * (self._flat(self.right).conj() @ self._flat(self.left).T)
        return complex(np.sum(self.coef * M.T))

    def kernel_diagonal(self) -> np.ndarray:
        L = self._flat(self.left)
        R = self._flat(self.right)
        return np.einsum("jk,jx,kx->x", self.coef, L, R.conj(), optimize=True).reshape(self.grid.shape)

    def core_svd(self):
        """Weighted-orthonormal bases and singular values: ``A = P diag(s) Q*``."""
        QL, RL = _weighted_qr(self._flat(self.left), self.grid.cell)
        QR_, RR = _weighted_qr(self._flat(self.right), self.grid.cell)
        core = RL @ self.coef @ RR.conj().T
        if core.size == 0:
            return QL, np.zeros(0), QR_, np.zeros((0, 0)), np.zeros((0, 0))
        U, s, Vh = np.linalg.svd(core)
        return QL, s, QR_, U, Vh

    def singular_values(self) -> np.ndarray:
        _, s, *_ = self.core_svd()
        if s.size and s[0] > 0:
            s = np.where(s < SV_CUTOFF * s[0], 0.0, s)
        return s


def _check_same(a: LowRankOperator, b: LowRankOperator) -> None:
    if a.grid != b.grid or a.hbar != b.hbar:
        raise ValueError("operators live on different grids or hbar")


def _weighted_qr(F: np.ndarray, cell: float):
    """``F^T = Q R`` with the columns of Q orthonormal under the dx^d inner product."""
    if F.shape[0] == 0:
        return np.zeros((F.shape[1], 0), dtype=complex), np.zeros((0, 0), dtype=complex)
    Q, R = sla.qr(np.sqrt(cell) * F.T, mode="economic")
    return Q / np.sqrt(cell), R


# -- density ----------------------------------------------------------------

def density_array(A: LowRankOperator) -> np.ndarray:
    rho = A.scale * A.kernel_diagonal()
    return rho.real.astype(complex) if A.hermitian else rho


def density(A: LowRankOperator) -> Field:
    """Semi-classically scaled density ``(2 pi hbar)^d A(x, x)``."""
    return Field(A.grid, density_array(A))


# -- Schatten norms ---------------------------------------------------------

def schatten_norm(A: LowRankOperator, r: float) -> float:
    """``(2 pi hbar)^{d/r} ||A||_{S^r}``; ``r = inf`` is the operator norm."""
    if not r >= 1:
        raise ValueError(f"Schatten exponent must be >= 1, got {r}")
    s = A.singular_values()
    if s.size == 0:
        return 0.0
    if np.isinf(r):
        return float(s.max())
    return float(A.scale ** (1.0 / r) * np.sum(s**r) ** (1.0 / r))


def operator_norm(A: LowRankOperator) -> float:
    return schatten_norm(A, np.inf)


# -- weights ----------------------------------------------------------------

@dataclass(frozen=True)
class Weight:
    """Japanese-bracket weight ``<x>^power`` or ``<hbar xi>^power``."""

    kind: str = "position"
    power: float = 0.0

    def __post_init__(self):
        if self.kind not in ("position", "frequency"):
            raise ValueError(f"weight kind must be position or frequency, got {self.kind!r}")

    def symbol(self, grid: Grid, hbar: float) -> np.ndarray:
        if self.kind == "position":
            return (1.0 + grid.radius2()) ** (self.power / 2)
        return to_fft_order((1.0 + hbar**2 * grid.xi2()) ** (self.power / 2), grid)

    def act(self, values: np.ndarray, grid: Grid, hbar: float) -> np.ndarray:
        if self.power == 0:
            return values
        m = self.symbol(grid, hbar)
        if self.kind == "position":
            return values * m
        return apply_symbol(values, m, grid)


def position_weight(s: float) -> Weight:
    return Weight("position", s)


def frequency_weight(s: float) -> Weight:
    return Weight("frequency", s)


def apply_weights(A: LowRankOperator, left: Weight, right: Weight) -> LowRankOperator:
    """``W_left A W_right`` for real self-adjoint weights."""
    g, h = A.grid, A.hbar
    herm = A.hermitian and left == right
    return A.with_factors(left.act(A.left, g, h), right.act(A.right, g, h), A.coef, herm)


# -- commutators ------------------------------------------------------------

GENERATORS = ("position", "scaled_position", "gradient")


def commutator(A: LowRankOperator, generator: str, axis: int) -> LowRankOperator:
    """``[G, A]`` for ``G`` in {x_j, x_j/hbar, d/dx_j}; rank at most doubles."""
    g = A.grid
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    if not 0 <= axis < g.d:
        raise ValueError(f"axis {axis} out of range for d={g.d}")
    k = A.coef
    Z = np.zeros_like(k)
    if generator == "gradient":
        sym = g.derivative_symbols()[axis]
        dL = apply_symbol(A.left, sym, g)
        dR = apply_symbol(A.right, sym, g)
        # [D, |f><g|] = |Df><g| + |f><Dg|   (D* = -D)
        left = np.concatenate([dL, A.left])
        right = np.concatenate([A.right, dR])
        C = np.block([[k, Z], [Z, k]])
    else:
        x = g.coords()[axis]
        if generator == "scaled_position":
            x = x / A.hbar
        left = np.concatenate([x * A.left, A.left])
        right = np.concatenate([A.right, x * A.right])
        C = np.block([[k, Z], [Z, -k]])
    return A.with_factors(left, right, C, False)


# -- norm ledger -------------------------------------------------------------

@dataclass
class NormLedger:
    entries: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    total_keys: tuple = ()

    @property
    def total(self) -> float:
        return float(sum(self.entries[k] for k in self.total_keys))

    def __getitem__(self, key: str) -> float:
        if key == "total":
            return self.total
        return self.entries[key]

    def as_dict(self) -> dict:
        out = dict(self.entries)
        if self.total_keys:
            out["total"] = self.total
        out.update({f"param.{k}": v for k, v in self.params.items()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormLedger":
        raw = json.loads(text)
        params = {k[6:]: v for k, v in raw.items() if k.startswith("param.")}
        entries = {k: v for k, v in raw.items() if not k.startswith("param.") and k != "total"}
        keys = tuple(entries) if "total" in raw else ()
        return cls(entries, params, keys)


def _sum_over_axes(fn: Callable[[int], float], d: int) -> float:
    return float(sum(fn(j) for j in range(d)))


def _sum_over_pairs(fn: Callable[[int, int], float], d: int) -> float:
    return float(sum(fn(j, k) for j in range(d) for k in range(d)))


def x_sigma_norm(A: LowRankOperator, sigma: float = 1.6) -> NormLedger:
    """All terms of the initial-data norm, summed over coordinates."""
    d = A.grid.d
    X = position_weight
    H = frequency_weight
    S1 = lambda B: schatten_norm(B, 1)
    S2 = lambda B: schatten_norm(B, 2)
    B_ = operator_norm
    nab = lambda B, j: commutator(B, "gradient", j)
    xh = lambda B, j: commutator(B, "scaled_position", j)
    s, s2 = sigma, sigma / 2
    e = {
        "S1": S1(A),
        "B_hgrad": B_(apply_weights(A, H(s), H(s))),
        "B_x": B_(apply_weights(A, X(s), X(s))),
        "S1_grad": _sum_over_axes(lambda j: S1(nab(A, j)), d),
        "S1_xh": _sum_over_axes(lambda j: S1(xh(A, j)), d),
        "S2_hgrad_grad": _sum_over_axes(lambda j: S2(apply_weights(nab(A, j), H(s), H(s))), d),
        "S2_x_xh": _sum_over_axes(lambda j: S2(apply_weights(xh(A, j), X(s), X(s))), d),
        "B_hgrad_grad": _sum_over_axes(lambda j: B_(apply_weights(nab(A, j), H(s), H(s))), d),
        "B_x_xh": _sum_over_axes(lambda j: B_(apply_weights(xh(A, j), X(s), X(s))), d),
        "S2_hgrad_grad_grad": _sum_over_pairs(
            lambda j, k: S2(apply_weights(nab(nab(A, k), j), H(s2), H(s2))), d),
        "S2_x_xh_xh": _sum_over_pairs(
            lambda j, k: S2(apply_weights(xh(xh(A, k), j), X(s2), X(s2))), d),
        "S2_hgrad_grad_xh": _sum_over_pairs(
            lambda j, k: S2(apply_weights(nab(xh(A, k), j), H(s2), H(s2))), d),
        "S2_x_grad_xh": _sum_over_pairs(
            lambda j, k: S2(apply_weights(nab(xh(A, k), j), X(s2), X(s2))), d),
    }
    for k, v in e.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite ledger term {k}")
    return NormLedger(e, {"sigma": sigma, "hbar": A.hbar, "d": d}, tuple(e))


# -- recompression -----------------------------------------------------------

def recompress(A: LowRankOperator, tol: float = 0.0) -> LowRankOperator:
    """Smallest-rank operator within ``tol`` of ``A`` in the scaled S^2 norm."""
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    if A.rank_bound == 0:
        return A
    scale2 = A.scale  # (2 pi hbar)^{d} multiplies squared S^2 norms
    if A.hermitian:
        Q, R = _weighted_qr(A._flat(A.left), A.grid.cell)
        core = R @ A.coef @ R.conj().T
        core = (core + core.conj().T) / 2
        lam, V = np.linalg.eigh(core)
        order = np.argsort(-np.abs(lam))
        lam, V = lam[order], V[:, order]
        keep = _keep_count(np.abs(lam), tol, scale2)
        basis = (Q @ V[:, :keep]).T.reshape((keep,) + A.grid.shape)
        return A.with_factors(basis, basis, np.diag(lam[:keep]).astype(complex), True)
    QL, s, QR_, U, Vh = A.core_svd()
    keep = _keep_count(s, tol, scale2)
    left = (QL @ U[:, :keep]).T.reshape((keep,) + A.grid.shape)
    right = (QR_ @ Vh[:keep].conj().T).T.reshape((keep,) + A.grid.shape)
    return A.with_factors(left, right, np.diag(s[:keep]).astype(complex), False)


def _keep_count(s: np.ndarray, tol: float, scale2: float) -> int:
    # tail[i] = scaled S2 norm of dropping s[i:]
    if s.size == 0:
        return 0
    tail = np.sqrt(scale2 * np.cumsum((s**2)[::-1])[::-1])
    tail = np.append(tail, 0.0)
    ok = np.nonzero(tail <= tol)[0]
    return int(ok[0]) if tol > 0 else int(np.count_nonzero(s > SV_CUTOFF * s[0]) if s[0] > 0 else 0)


def hermitian_eig(A: LowRankOperator, tol: float = 0.0):
    """Orthonormal orbitals and real occupations of a hermitian operator."""
    if not A.hermitian:
        raise ValueError("operator is not flagged hermitian")
    B = recompress(A, tol)
    return B.left, np.real(np.diag(B.coef))


# -- persistence -------------------------------------------------------------

OP_MAGIC = b"SCLO"
_OP_HEADER = struct.Struct("<4sHdIB")


def write_operator(fp: BinaryIO, A: LowRankOperator) -> None:
    k, m = A.coef.shape
    fp.write(_OP_HEADER.pack(OP_MAGIC, 1, A.hbar, k, int(A.hermitian)))
    fp.write(struct.pack("<I", m))
    fp.write(np.ascontiguousarray(A.coef, dtype="<c16").tobytes())
    for f in A.left:
        write_field(fp, Field(A.grid, f, POSITION))
    for g in A.right:
        write_field(fp, Field(A.grid, g, POSITION))


def read_operator(fp: BinaryIO) -> LowRankOperator:
    raw = fp.read(_OP_HEADER.size)
    magic, version, hbar, k, herm = _OP_HEADER.unpack(raw)
    if magic != OP_MAGIC or version != 1:
        raise ValueError("not an operator snapshot")
    (m,) = struct.unpack("<I", fp.read(4))
    coef = np.frombuffer(fp.read(16 * k * m), dtype="<c16").reshape(k, m).astype(complex)
    left = [read_field(fp) for _ in range(k)]
    right = [read_field(fp) for _ in range(m)]
    grid = left[0].grid if left else (right[0].grid if right else None)
    if grid is None:
        raise ValueError("cannot restore an empty operator without a grid")
    return LowRankOperator(grid, hbar, np.stack([f.values for f in left]),
                           np.stack([f.values for f in right]), coef, bool(herm))


def random_operator(grid: Grid, hbar: float, rank: int, rng: np.random.Generator,
                    hermitian: bool = False, smooth: bool = True) -> LowRankOperator:
    """Random test operator with localized smooth (or white) factors."""
    def draw(k):
        z = rng.standard_normal((k,) + grid.shape) + 1j * rng.standard_normal((k,) + grid.shape)
        if smooth:
            env = np.exp(-grid.radius2() / (2 * (grid.L / 10) ** 2))
            cut = to_fft_order(np.exp(-grid.xi2() / (2 * (0.2 * np.pi / grid.dx) ** 2)), grid)
            z = apply_symbol(z, cut, grid) * env
        return z
    f = draw(rank)
    if hermitian:
        C = rng.standard_normal((rank, rank)) + 1j * rng.standard_normal((rank, rank))
        C = (C + C.conj().T) / 2
        return LowRankOperator(grid, hbar, f, f, C, True)
    g = draw(rank)
    C = rng.standard_normal((rank, rank)) + 1j * rng.standard_normal((rank, rank))
    return LowRankOperator(grid, hbar, f, g, C, False)
