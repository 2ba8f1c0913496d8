"""Phase-space side: Wigner transform, Toeplitz quantization and Vlasov transport."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np
import scipy.fft as sfft
from scipy import signal

from .grid import _HEADER, MAGIC, VERSION, Grid, boundary_mass_fraction, convolve_array, fft_workers
from .operators import LowRankOperator
from .propagators import BOUNDARY_TOL, PotentialSpec

NEG_TOL = 1e-12


@dataclass(frozen=True)
class ClassicalDistribution:
    """Real samples ``f(q, p)``; array axes are the q axes followed by the p axes."""

    qgrid: Grid
    pgrid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.qgrid.d != self.pgrid.d:
            raise ValueError("q and p grids must share the dimension")
        v = np.array(np.real(self.values), dtype=float).reshape(self.qgrid.shape + self.pgrid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("distribution samples must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.qgrid.d

    @property
    def cell(self) -> float:
        return self.qgrid.cell * self.pgrid.cell

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell)

    def with_values(self, values: np.ndarray) -> "ClassicalDistribution":
        return ClassicalDistribution(self.qgrid, self.pgrid, values)

    def mesh(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Broadcastable (q, p) coordinates over the 2d-dimensional array."""
        d = self.d
        q = [c.reshape(c.shape + (1,) * d) for c in self.qgrid.coords()]
        p = [c.reshape((1,) * d + c.shape) for c in self.pgrid.coords()]
        return q, p


def sample_distribution(qgrid: Grid, pgrid: Grid, fn: Callable) -> ClassicalDistribution:
    """Sample ``fn(q_list, p_list)`` on the product lattice."""
    empty = ClassicalDistribution(qgrid, pgrid, np.zeros(qgrid.shape + pgrid.shape))
    q, p = empty.mesh()
    return empty.with_values(np.broadcast_to(fn(q, p), qgrid.shape + pgrid.shape))


def gaussian_seed(qgrid: Grid, pgrid: Grid, sq: float = 0.5, sp: float = 0.5, mass: float = 1.0,
                  q0: float = 0.0, p0: float = 0.0) -> ClassicalDistribution:
    """Normalized product Gaussian in (q, p)."""
    d = qgrid.d
    norm = mass / ((2 * np.pi * sq * sp) ** d)

    def fn(q, p):
        a = sum((qa - q0) ** 2 for qa in q) / (2 * sq**2)
        b = sum((pa - p0) ** 2 for pa in p) / (2 * sp**2)
        return norm * np.exp(-a - b)

    return sample_distribution(qgrid, pgrid, fn)


def classical_density(f: ClassicalDistribution) -> np.ndarray:
    """``rho(q) = int f(q, p) dp``."""
    d = f.d
    return f.values.sum(axis=tuple(range(d, 2 * d))) * f.pgrid.cell


# -- Wigner transform ------------------------------------------------------------

def wigner(A: LowRankOperator, pgrid: Grid | None = None) -> ClassicalDistribution:
    """``Wig[A](q, p) = int A(q + y/2, q - y/2) e^{-i p y / hbar} dy`` on the operator's q lattice.

    The factors are Fourier-upsampled to spacing ``dx/2`` so that ``y`` runs over
    multiples of ``dx`` and the p band covers the full lattice band
    ``|p| < pi hbar / dx``; p samples outside that band are set to zero.  Pairs
    leaving the box contribute nothing.  The p
    lattice defaults to the natural one of that step.
    """
    pgrid, W = _wigner_complex(A, pgrid)
    return ClassicalDistribution(A.grid, pgrid, W.real)


def natural_pgrid(A: LowRankOperator) -> Grid:
    g = A.grid
    return Grid(g.d, 2 * g.n, 2 * np.pi * A.hbar / g.dx)


WIGNER_MAX_ENTRIES = 1 << 24


def _upsample(F: np.ndarray, d: int) -> np.ndarray:
    for ax in range(1, d + 1):
        F = signal.resample(F, 2 * F.shape[ax], axis=ax)
    return F


def _wigner_complex(A: LowRankOperator, pgrid: Grid | None):
    g = A.grid
    if g.d > 2:
        raise ValueError("Wigner transform refused for d = 3 (cost guard)")
    pgrid = natural_pgrid(A) if pgrid is None else pgrid
    n, d = g.n, g.d
    if (n * 2 * n) ** d > WIGNER_MAX_ENTRIES:
        raise ValueError("Wigner transform refused: lattice too large for the (q, y) table")
    h = _upsample(np.tensordot(A.coef, A.left, axes=(0, 0)), d)  # h_k = sum_j C_jk f_j
    gk = _upsample(A.right, d)
    m = np.arange(-n, n)
    i = 2 * np.arange(n)
    plus = i[:, None] + m[None, :]
    minus = i[:, None] - m[None, :]
    inside = ((plus >= 0) & (plus < 2 * n) & (minus >= 0) & (minus < 2 * n)).astype(float)
    plus, minus = plus % (2 * n), minus % (2 * n)
    pax = pgrid.axis()
    # beyond the lattice band the sum only repeats periodic copies
    band = np.abs(pax) < np.pi * A.hbar / g.dx
    E = np.exp(-1j * np.outer(g.dx * m, pax) / A.hbar) * g.dx * band[None, :]
    if d == 1:
        K = np.zeros((n, 2 * n), dtype=complex)
        for hk, gkk in zip(h, gk):
            K += hk[plus] * gkk[minus].conj()
        W = (K * inside) @ E
    else:
        K = np.zeros((n, n, 2 * n, 2 * n), dtype=complex)
        P1, P2 = plus[:, None, :, None], plus[None, :, None, :]
        M1, M2 = minus[:, None, :, None], minus[None, :, None, :]
        for hk, gkk in zip(h, gk):
            K += hk[P1, P2] * gkk[M1, M2].conj()
        K *= inside[:, None, :, None] * inside[None, :, None, :]
        W = np.einsum("abcd,ce,df->abef", K, E, E, optimize=True)
    return pgrid, W


def wigner_imag_residual(A: LowRankOperator, pgrid: Grid | None = None) -> float:
    """Largest imaginary part of the Wigner transform (zero for hermitian A)."""
    return float(np.abs(_wigner_complex(A, pgrid)[1].imag).max())


# -- Toeplitz quantization ---------------------------------------------------------

def coherent_states(grid: Grid, hbar: float, q: np.ndarray, p: np.ndarray, literal_coherent: bool = False) -> np.ndarray:
    """Coherent states centred at rows of ``q``, ``p`` (shape (N, d)), sampled on ``grid``.

    Default: ``(pi hbar)^{-d/4} exp(-|x-q|^2/(2 hbar)) exp(i p.x / hbar)``.  The
    literal variant uses ``exp(-|x-q|^2/(2 hbar) + i q.(x-p)/hbar)`` without normalization.
    """
    x = grid.coords()
    N = q.shape[0]
    out = np.ones((N,) + grid.shape, dtype=complex)
    for a in range(grid.d):
        xa = x[a].reshape((1,) + x[a].shape)
        qa = q[:, a].reshape((N,) + (1,) * grid.d)
        pa = p[:, a].reshape((N,) + (1,) * grid.d)
        if literal_coherent:
            out = out * np.exp(-((xa - qa) ** 2) / (2 * hbar) + 1j * qa * (xa - pa) / hbar)
        else:
            out = out * np.exp(-((xa - qa) ** 2) / (2 * hbar) + 1j * pa * xa / hbar)
    if not literal_coherent:
        out *= (np.pi * hbar) ** (-grid.d / 4)
    return out


def default_strides(f0: ClassicalDistribution, hbar: float) -> tuple[int, int]:
    """Largest strides giving node spacing <= sqrt(hbar)/2 in q and p."""
    target = np.sqrt(hbar) / 2
    sq = max(1, int(np.floor(target / f0.qgrid.dx)))
    sp = max(1, int(np.floor(target / f0.pgrid.dx)))
    return sq, sp


def _toeplitz_nodes(f0: ClassicalDistribution, values: np.ndarray, hbar: float,
                    strides: tuple[int, int] | None, g: Grid, literal_coherent: bool, cutoff: float):
    """Coherent states and signed quadrature coefficients of the strided node set."""
    d = f0.d
    sq, sp = strides or default_strides(f0, hbar)
    sl = (slice(None, None, sq),) * d + (slice(None, None, sp),) * d
    sub = values[sl]
    qax = f0.qgrid.axis()[::sq]
    pax = f0.pgrid.axis()[::sp]
    weight = (sq * f0.qgrid.dx) ** d * (sp * f0.pgrid.dx) ** d
    active = np.argwhere(np.abs(sub) > cutoff * np.abs(values).max())
    if active.size == 0:
        return None, None
    q = np.stack([qax[active[:, a]] for a in range(d)], axis=1)
    p = np.stack([pax[active[:, d + a]] for a in range(d)], axis=1)
    c = (2 * np.pi * hbar) ** (-d) * weight * sub[tuple(active.T)]
    return coherent_states(g, hbar, q, p, literal_coherent), c


def toeplitz_quantize(f0: ClassicalDistribution, hbar: float, strides: tuple[int, int] | None = None,
                      tol: float = 1e-8, grid: Grid | None = None, literal_coherent: bool = False,
                      cutoff: float = 1e-14) -> LowRankOperator:
    """``(2 pi hbar)^{-d} sum_a w_a f0(q_a, p_a) |phi_a><phi_a|`` compressed to orthonormal orbitals.

    Nodes are every ``strides``-th sample of ``f0``; nodes below ``cutoff * max f0``
    are skipped.  Eigenvalues below ``tol`` times the largest are dropped.
    """
    if not 0 < hbar <= 1:
        raise ValueError("hbar must lie in (0, 1]")
    vals = f0.values
    if vals.min() < -NEG_TOL * max(1.0, vals.max()):
        raise ValueError("Toeplitz quantization needs nonnegative data")
    g = f0.qgrid if grid is None else grid
    phi, c = _toeplitz_nodes(f0, np.maximum(vals, 0.0), hbar, strides, g, literal_coherent, cutoff)
    if phi is None:
        return LowRankOperator.zero(g, hbar)
    # only rows where some coherent state is non-negligible enter the SVD
    mask = (np.abs(phi) > 1e-17 * np.abs(phi).max()).reshape(len(c), -1).any(axis=0)
    B = phi.reshape(len(c), -1)[:, mask].T * np.sqrt(c)[None, :]
    U, S, _ = np.linalg.svd(np.sqrt(g.cell) * B, full_matrices=False)
    lam = S**2
    keep = int(np.count_nonzero(lam > tol * lam[0])) if lam.size else 0
    orbs = np.zeros((keep, g.size), dtype=complex)
    orbs[:, mask] = (U[:, :keep] / np.sqrt(g.cell)).T
    return LowRankOperator.from_orbitals(g, hbar, orbs.reshape((keep,) + g.shape), lam[:keep])


def toeplitz_signed(f0: ClassicalDistribution, values: np.ndarray, hbar: float,
                    strides: tuple[int, int] | None = None, literal_coherent: bool = False,
                    cutoff: float = 1e-14) -> LowRankOperator:
    """Uncompressed quadrature of ``Op_T`` for signed samples on ``f0``'s lattice."""
    g = f0.qgrid
    phi, c = _toeplitz_nodes(f0, np.asarray(values, dtype=float), hbar, strides, g, literal_coherent, cutoff)
    if phi is None:
        return LowRankOperator.zero(g, hbar)
    return LowRankOperator(g, hbar, phi, phi, np.diag(c).astype(complex), True)


def _spectral_partial(values: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    k = 2 * np.pi * np.fft.fftfreq(grid.n, grid.dx)
    k[grid.n // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = grid.n
    F = sfft.fft(values, axis=axis, workers=fft_workers())
    return sfft.ifft(F * (1j * k).reshape(shape), axis=axis, workers=fft_workers()).real


@dataclass(frozen=True)
class ToeplitzCalculus:
    """Residuals of the two derivative identities at each stride, with refinement orders."""

    strides: list
    p_residuals: list
    q_residuals: list
    floor: float = 1e-10

    def _orders(self, r: list) -> list:
        """``log(r_a / r_b) / log(h_a / h_b)`` with ``h`` the coarser of the two node strides."""
        h = [max(s) for s in self.strides]
        out = []
        for (a, b), (ha, hb) in zip(zip(r, r[1:]), zip(h, h[1:])):
            if b <= 0:
                out.append(float("inf"))
            elif ha == hb:
                out.append(float("nan"))
            else:
                out.append(float(np.log(a / b) / np.log(ha / hb)))
        return out

    @property
    def p_orders(self) -> list:
        return self._orders(self.p_residuals)

    @property
    def q_orders(self) -> list:
        return self._orders(self.q_residuals)

    def converges(self, which: str, min_order: float = 2.0) -> bool:
        r = self.p_residuals if which == "p" else self.q_residuals
        orders = self._orders(r)
        # a pair already at the floor cannot show an order; it passes if it stays there
        return all(o >= min_order or b <= self.floor for o, b in zip(orders, r[1:]))


def _toeplitz_kernel(f0: ClassicalDistribution, values: np.ndarray, hbar: float, strides,
                     literal_coherent: bool) -> np.ndarray:
    phi, c = _toeplitz_nodes(f0, values, hbar, strides, f0.qgrid, literal_coherent, 1e-14)
    if phi is None:
        return np.zeros((f0.qgrid.size,) * 2, dtype=complex)
    P = phi.reshape(len(c), -1)
    return (P.T * c) @ P.conj()


def toeplitz_calculus(f0: ClassicalDistribution, hbar: float, strides: list,
                      literal_coherent: bool = False) -> ToeplitzCalculus:
    """Compare ``[x/(i hbar), Op_T f0]`` with ``Op_T[d_p f0]`` and ``[d, Op_T f0]`` with ``Op_T[d_q f0]``.

    Residuals are Hilbert-Schmidt norms relative to the right-hand sides, for
    each (q stride, p stride) pair in ``strides`` (coarse to fine).  d = 1, and
    the kernels are materialized, so the q lattice must be small.
    """
    from .dense import derivative_matrix

    _require_1d(f0)
    g = f0.qgrid
    dp = _spectral_partial(f0.values, f0.pgrid, 1)
    dq = _spectral_partial(f0.values, g, 0)
    x = g.axis()[:, None] / (1j * hbar)
    D = derivative_matrix(g, 0)
    pr, qr = [], []
    for st in strides:
        K = _toeplitz_kernel(f0, f0.values, hbar, st, literal_coherent)
        Kp = _toeplitz_kernel(f0, dp, hbar, st, literal_coherent)
        Kq = _toeplitz_kernel(f0, dq, hbar, st, literal_coherent)
        lhs_p = x * K - K * x.T
        lhs_q = D @ K - K @ D
        pr.append(float(np.linalg.norm(lhs_p - Kp) / max(np.linalg.norm(Kp), 1e-300)))
        qr.append(float(np.linalg.norm(lhs_q - Kq) / max(np.linalg.norm(Kq), 1e-300)))
    return ToeplitzCalculus([tuple(s) for s in strides], pr, qr)


# -- Vlasov transport ---------------------------------------------------------------

def _q_shift(values: np.ndarray, f: ClassicalDistribution, shift: np.ndarray) -> np.ndarray:
    """``values(q - shift(p), p)`` by exact Fourier shift in q (d = 1)."""
    k = 2 * np.pi * np.fft.fftfreq(f.qgrid.n, f.qgrid.dx)
    F = sfft.fft(values, axis=0, workers=fft_workers())
    F *= np.exp(-1j * np.outer(k, shift))
    return sfft.ifft(F, axis=0, workers=fft_workers()).real


def _p_shift(values: np.ndarray, f: ClassicalDistribution, shift: np.ndarray) -> np.ndarray:
    """``values(q, p - shift(q))`` by Fourier shift in p (d = 1)."""
    k = 2 * np.pi * np.fft.fftfreq(f.pgrid.n, f.pgrid.dx)
    F = sfft.fft(values, axis=1, workers=fft_workers())
    F *= np.exp(-1j * np.outer(shift, k))
    return sfft.ifft(F, axis=1, workers=fft_workers()).real


def _require_1d(f: ClassicalDistribution) -> None:
    if f.d != 1:
        raise ValueError("Vlasov transport is implemented for d = 1 only")


def q_boundary_fraction(f: ClassicalDistribution) -> float:
    return boundary_mass_fraction(classical_density(f), f.qgrid)


def vlasov_free(f0: ClassicalDistribution, t: float) -> ClassicalDistribution:
    """Free transport ``f0(q - t p, p)``."""
    _require_1d(f0)
    if t == 0:
        return f0
    return f0.with_values(_q_shift(f0.values, f0, t * f0.pgrid.axis()))


@dataclass
class VlasovTrajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def at(self, t: float) -> ClassicalDistribution:
        for s, f in zip(self.times, self.states):
            if abs(s - t) <= 1e-9 * max(1.0, abs(t)):
                return f
        raise ValueError(f"t={t} is not a stamp")


def reflect(f: ClassicalDistribution) -> ClassicalDistribution:
    """``f(-q, -p)`` on the lattice (index ``j -> n - j`` on each axis)."""
    v = f.values
    for ax in range(v.ndim):
        v = np.roll(np.flip(v, axis=ax), 1, axis=ax)
    return f.with_values(v)


def parity_asymmetry(f: ClassicalDistribution) -> float:
    """L1 distance between ``f`` and its phase-space reflection."""
    return float(np.abs(f.values - reflect(f).values).sum() * f.cell)


def vlasov_force(f: ClassicalDistribution, w: PotentialSpec) -> np.ndarray:
    """``d/dq (w * rho(f))`` on the q lattice."""
    g = f.qgrid
    if w.is_zero:
        return np.zeros(g.n)
    V = convolve_array(w.kernel(g), classical_density(f).astype(complex), g).real
    k = 2 * np.pi * np.fft.fftfreq(g.n, g.dx)
    k[g.n // 2] = 0.0
    return sfft.ifft(1j * k * sfft.fft(V)).real


def vlasov_evolve(f0: ClassicalDistribution, w: PotentialSpec, T: float, dt: float,
                  stride: int = 1, boundary_tol: float = BOUNDARY_TOL) -> VlasovTrajectory:
    """Strang-split Vlasov flow: half q-transport, full momentum kick, half q-transport."""
    from .propagators import step_schedule

    _require_1d(f0)
    traj = VlasovTrajectory([0.0], [f0], {"boundary_contaminated": False})
    f = f0
    sched = step_schedule(0.0, T, dt)
    pax = f0.pgrid.axis()
    for m, (a, h) in enumerate(sched):
        v = _q_shift(f.values, f, 0.5 * h * pax)
        half = f.with_values(v)
        force = vlasov_force(half, w)
        # dp/dt = -V'(q): f(t+h, q, p) = f(t, q, p + h V'(q))
        v = _p_shift(v, f, -h * force)
        v = _q_shift(v, f, 0.5 * h * pax)
        f = f.with_values(v)
        if (m + 1) % stride == 0 or m + 1 == len(sched):
            traj.times.append(round(a + h, 12))
            traj.states.append(f)
        if q_boundary_fraction(f) > boundary_tol:
            traj.flags["boundary_contaminated"] = True
    return traj


# -- quantum / classical distance ---------------------------------------------------

def _bump(s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def test_panel(f: ClassicalDistribution, scale: float = 1.0) -> list[np.ndarray]:
    """Sixteen smooth compactly supported test functions on a 4x4 lattice of centres (d = 1)."""
    _require_1d(f)
    q, p = f.mesh()
    centres = scale * np.array([-1.5, -0.5, 0.5, 1.5])
    r = 1.25 * scale
    return [_bump((q[0] - cq) / r) * _bump((p[0] - cp) / r) for cq in centres for cp in centres]


@dataclass(frozen=True)
class PhaseDistance:
    weak: float
    l2: float

    @property
    def combined(self) -> float:
        return self.weak + self.l2

    def __float__(self) -> float:
        return self.weak


def distribution_distance(a: ClassicalDistribution, b: ClassicalDistribution, scale: float = 1.0) -> PhaseDistance:
    if a.qgrid != b.qgrid or a.pgrid != b.pgrid:
        raise ValueError("distributions live on different phase-space grids")
    diff = a.values - b.values
    weak = max(abs(float(np.sum(diff * phi) * a.cell)) for phi in test_panel(a, scale))
    l2 = float(np.sqrt(np.sum(diff**2) * a.cell))
    return PhaseDistance(weak, l2)


def wigner_vlasov_distance(A: LowRankOperator, f: ClassicalDistribution, scale: float = 1.0) -> PhaseDistance:
    """Panel (weak) and L2 distance between ``Wig[A]`` and ``f`` on ``f``'s lattice."""
    if A.grid != f.qgrid:
        raise ValueError("operator grid must match the q lattice of the distribution")
    return distribution_distance(wigner(A, f.pgrid), f, scale)


# -- persistence -------------------------------------------------------------------

def write_distribution(fp: BinaryIO, f: ClassicalDistribution) -> None:
    """Field snapshot layout with the dimension doubled; the p axis (L, n) sits in the header padding."""
    fp.write(_HEADER.pack(MAGIC, VERSION, 2 * f.d, f.qgrid.n, f.qgrid.L, 0, f.pgrid.L, f.pgrid.n))
    fp.write(np.ascontiguousarray(f.values, dtype="<f8").astype("<c16").tobytes())


def read_distribution(fp: BinaryIO) -> ClassicalDistribution:
    magic, version, d2, n, L, _, Lp, n_p = _HEADER.unpack(fp.read(_HEADER.size))
    if magic != MAGIC or version != VERSION or d2 % 2:
        raise ValueError("not a phase-space snapshot")
    d = d2 // 2
    qg, pg = Grid(d, n, L), Grid(d, n_p, Lp)
    count = qg.size * pg.size
    data = np.frombuffer(fp.read(16 * count), dtype="<c16")
    return ClassicalDistribution(qg, pg, data.real.reshape(qg.shape + pg.shape))
