"""Periodic spectral grids, symmetric-normalized Fourier transforms and friends.

Positions are stored sorted, ``x_j = -L/2 + j*dx``.  Frequency-space samples
are also stored sorted, ``xi_k = 2*pi*k/L`` with ``k = -n/2 .. n/2-1``.
The continuum convention is ``F f(xi) = (2 pi)^{-d/2} int e^{-i x xi} f(x) dx``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.signal import czt

MAX_POINTS = 1 << 24
THREADS_ENV = "SCHARTREE_THREADS"

POSITION = "position"
FREQUENCY = "frequency"


class GridError(ValueError):
    pass


def fft_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    d: int
    n: int
    L: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise GridError(f"dimension must be 1, 2 or 3, got {self.d}")
        if not _is_pow2(self.n) or self.n < 8:
            raise GridError(f"points per axis must be a power of two >= 8, got {self.n}")
        if not self.L > 0:
            raise GridError(f"box length must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return self.L / self.n

    @property
    def dxi(self) -> float:
        return 2 * np.pi / self.L

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell(self) -> float:
        """Quadrature weight dx^d."""
        return self.dx**self.d

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    def axis(self) -> np.ndarray:
        return -self.L / 2 + self.dx * np.arange(self.n)

    def frequency_axis(self) -> np.ndarray:
        return self.dxi * np.arange(-self.n // 2, self.n // 2)

    def coords(self) -> list[np.ndarray]:
        """Broadcastable position coordinates, one array per axis."""
        return _open_mesh(self.axis(), self.d)

    def frequencies(self) -> list[np.ndarray]:
        """Broadcastable sorted frequency coordinates."""
        return _open_mesh(self.frequency_axis(), self.d)

    def fft_frequencies(self) -> list[np.ndarray]:
        return _open_mesh(2 * np.pi * np.fft.fftfreq(self.n, self.dx), self.d)

    def radius2(self) -> np.ndarray:
        return sum(c**2 for c in self.coords())

    def xi2(self, fft_order: bool = False) -> np.ndarray:
        ks = self.fft_frequencies() if fft_order else self.frequencies()
        return sum(k**2 for k in ks)

    def derivative_symbols(self) -> list[np.ndarray]:
        """i*xi_j in FFT order with the Nyquist mode zeroed (real in, real out)."""
        k = 2 * np.pi * np.fft.fftfreq(self.n, self.dx)
        k[self.n // 2] = 0.0
        return [1j * c for c in _open_mesh(k, self.d)]

    def compatible(self, other: "Grid") -> bool:
        return self == other


def _open_mesh(ax: np.ndarray, d: int) -> list[np.ndarray]:
    out = []
    for a in range(d):
        shape = [1] * d
        shape[a] = ax.size
        out.append(ax.reshape(shape))
    return out


def make_grid(d: int, n: int, L: float, max_points: int = MAX_POINTS) -> Grid:
    g = Grid(int(d), int(n), float(L))
    if g.size > max_points:
        raise GridError(f"{n}^{d} points exceeds the memory budget of {max_points}")
    return g


@dataclass(frozen=True)
class Field:
    grid: Grid
    values: np.ndarray = field(repr=False)
    space: str = POSITION

    def __post_init__(self):
        v = np.array(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field samples must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if self.space not in (POSITION, FREQUENCY):
            raise ValueError(f"unknown space flag {self.space!r}")

    def l2(self) -> float:
        w = self.grid.cell if self.space == POSITION else self.grid.dxi**self.grid.d
        return float(np.sqrt(w * np.sum(np.abs(self.values) ** 2)))

    @property
    def real(self) -> np.ndarray:
        return self.values.real


# -- transforms on raw arrays (transform over the trailing d axes) ----------

def _shift_phase(grid: Grid) -> np.ndarray:
    # e^{-i x_0 xi_k} with x_0 = -L/2 is (-1)^k; FFT order
    k = np.fft.fftfreq(grid.n, 1.0 / grid.n).astype(int)
    s = np.where(k % 2 == 0, 1.0, -1.0)
    out = 1.0
    for c in _open_mesh(s, grid.d):
        out = out * c
    return out


def forward_array(values: np.ndarray, grid: Grid) -> np.ndarray:
    ax = grid.axes
    F = sfft.fftn(values, axes=ax, workers=fft_workers())
    F *= _shift_phase(grid) * (grid.cell / (2 * np.pi) ** (grid.d / 2))
    return sfft.fftshift(F, axes=ax)


def inverse_array(values: np.ndarray, grid: Grid) -> np.ndarray:
    ax = grid.axes
    F = sfft.ifftshift(values, axes=ax) * _shift_phase(grid)
    f = sfft.ifftn(F, axes=ax, workers=fft_workers())
    f *= grid.size * grid.dxi**grid.d / (2 * np.pi) ** (grid.d / 2)
    return f


def apply_symbol(values: np.ndarray, symbol_fft: np.ndarray, grid: Grid) -> np.ndarray:
    """Fourier multiplier with the symbol given in FFT order (fast path)."""
    ax = grid.axes
    w = fft_workers()
    return sfft.ifftn(symbol_fft * sfft.fftn(values, axes=ax, workers=w), axes=ax, workers=w)


def to_fft_order(symbol_sorted: np.ndarray, grid: Grid) -> np.ndarray:
    return sfft.ifftshift(symbol_sorted, axes=grid.axes)


def gradient_array(values: np.ndarray, grid: Grid) -> list[np.ndarray]:
    return [apply_symbol(values, s, grid) for s in grid.derivative_symbols()]


# -- public Field operations -------------------------------------------------

def fourier_transform(f: Field, direction: str = "forward") -> Field:
    if direction == "forward":
        if f.space != POSITION:
            raise ValueError("forward transform needs a position-space field")
        return Field(f.grid, forward_array(f.values, f.grid), FREQUENCY)
    if direction == "inverse":
        if f.space != FREQUENCY:
            raise ValueError("inverse transform needs a frequency-space field")
        return Field(f.grid, inverse_array(f.values, f.grid), POSITION)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def fourier_multiplier(f: Field, m: np.ndarray) -> Field:
    """Return ``F^{-1}[m F f]`` for symbol samples ``m`` on the sorted lattice."""
    if f.space != POSITION:
        raise ValueError("multiplier acts on position-space fields")
    m = np.asarray(m)
    if m.shape != f.grid.shape:
        raise ValueError(f"symbol shape {m.shape} does not match grid {f.grid.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("symbol samples must be finite")
    return Field(f.grid, apply_symbol(f.values, to_fft_order(m, f.grid), f.grid))


def convolve_array(w: np.ndarray, rho: np.ndarray, grid: Grid) -> np.ndarray:
    ax = grid.axes
    wk = sfft.fftn(sfft.ifftshift(w, axes=ax), axes=ax, workers=fft_workers())
    return grid.cell * sfft.ifftn(wk * sfft.fftn(rho, axes=ax, workers=fft_workers()), axes=ax)


def convolve(w: Field, rho: Field) -> Field:
    """Periodic convolution ``int w(x-y) rho(y) dy`` with dx^d quadrature."""
    if w.grid != rho.grid:
        raise GridError("convolution needs fields on the same grid")
    if w.space != POSITION or rho.space != POSITION:
        raise ValueError("convolution acts on position-space fields")
    return Field(w.grid, convolve_array(w.values, rho.values, w.grid))


FarField = Callable[[np.ndarray], np.ndarray]


def _far_values(far_field, pts: np.ndarray) -> np.ndarray:
    if far_field is None:
        return np.zeros(len(pts), dtype=complex)
    if callable(far_field):
        return np.asarray(far_field(pts), dtype=complex)
    return np.full(len(pts), complex(far_field))


def interpolate(f: Field, points, far_field: FarField | complex | None = None) -> np.ndarray:
    """Trigonometric evaluation of ``f`` at arbitrary points.

    Points with ``|p|_inf > L/2`` take ``far_field`` (a callable of the points,
    a constant, or zero when None).
    """
    if f.space != POSITION:
        raise ValueError("interpolation acts on position-space fields")
    g = f.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != g.d:
        pts = pts.reshape(-1, g.d)
    inside = np.all(np.abs(pts) <= g.L / 2, axis=1)
    out = np.empty(len(pts), dtype=complex)
    if np.any(inside):
        out[inside] = _trig_eval(f.values, g, pts[inside])
    if np.any(~inside):
        out[~inside] = _far_values(far_field, pts[~inside])
    return out


def _trig_eval(values: np.ndarray, g: Grid, pts: np.ndarray) -> np.ndarray:
    c = sfft.fftn(values, axes=g.axes, workers=fft_workers()) / g.size
    k = 2 * np.pi * np.fft.fftfreq(g.n, g.dx)
    x0 = -g.L / 2
    mats = [np.exp(1j * np.outer(pts[:, a] - x0, k)) for a in range(g.d)]
    if g.d == 1:
        return mats[0] @ c
    if g.d == 2:
        return np.einsum("pk,pl,kl->p", mats[0], mats[1], c, optimize=True)
    return np.einsum("pk,pl,pm,klm->p", mats[0], mats[1], mats[2], c, optimize=True)


def interpolate_lattice(f: Field, axis_points: Sequence[np.ndarray], far_field=None) -> np.ndarray:
    """Evaluate ``f`` on the tensor lattice ``axis_points[0] x ... x axis_points[d-1]``.

    Separable in-box evaluation costs ``d * n^d * m`` instead of ``n^d * m^d``.
    """
    g = f.grid
    if len(axis_points) != g.d:
        raise ValueError("need one point array per axis")
    c = sfft.fftn(f.values, axes=g.axes, workers=fft_workers()) / g.size
    k = 2 * np.pi * np.fft.fftfreq(g.n, g.dx)
    x0 = -g.L / 2
    out = c
    inside = []
    for a, pa in enumerate(axis_points):
        pa = np.asarray(pa, dtype=float)
        ins = np.abs(pa) <= g.L / 2
        inside.append(ins)
        E = np.zeros((pa.size, g.n), dtype=complex)
        E[ins] = np.exp(1j * np.outer(pa[ins] - x0, k))
        out = np.moveaxis(np.tensordot(E, out, axes=([1], [a])), 0, a)
    mask = inside[0]
    for ins in inside[1:]:
        mask = np.logical_and.outer(mask, ins)
    mask = np.asarray(mask).reshape(out.shape)
    if not np.all(mask):
        mesh = np.meshgrid(*[np.asarray(p, float) for p in axis_points], indexing="ij")
        pts = np.stack([m[~mask] for m in mesh], axis=-1)
        out = out.copy()
        out[~mask] = _far_values(far_field, pts)
    return out


def interpolate_scaled_lattice(f: Field, alpha: float, far_field=None) -> np.ndarray:
    """Evaluate ``f`` at ``alpha * k`` for the sorted integer lattice ``k`` on every axis.

    Chirp-z evaluation of the trigonometric interpolant, O(n log n) per axis.
    The result is laid out like a sorted frequency-space array.
    """
    g = f.grid
    n = g.n
    c = sfft.fftshift(sfft.fftn(f.values, axes=g.axes, workers=fft_workers()) / g.size, axes=g.axes)
    j = np.arange(-n // 2, n // 2)
    theta = g.dxi * alpha
    # c_j e^{-i kappa j x0} = c_j (-1)^j, then shift indices to 0..n-1 for czt
    pre = np.where(j % 2 == 0, 1.0, -1.0) * np.exp(-1j * theta * (n // 2) * np.arange(n))
    post = np.exp(1j * theta * (n // 2) ** 2) * np.exp(-1j * theta * (n // 2) * np.arange(n))
    out = c
    for a in range(g.d):
        shape = [1] * g.d
        shape[a] = n
        out = out * pre.reshape(shape)
        if theta == 0.0:
            out = np.broadcast_to(out.sum(axis=a, keepdims=True), out.shape).copy()
        else:
            out = czt(out, m=n, w=np.exp(1j * theta), a=1.0, axis=a)
        out = out * post.reshape(shape)
    pts_axis = alpha * j
    inside = np.abs(pts_axis) <= g.L / 2
    if not np.all(inside):
        mask = inside
        for _ in range(g.d - 1):
            mask = np.logical_and.outer(mask, inside)
        mesh = np.meshgrid(*([pts_axis] * g.d), indexing="ij")
        pts = np.stack([m[~mask] for m in mesh], axis=-1)
        out = np.array(out)
        out[~mask] = _far_values(far_field, pts)
    return out


def boundary_mass_fraction(density: np.ndarray, grid: Grid, shell: int = 1) -> float:
    """Fraction of ``int |density|`` carried by points within ``shell*dx`` of the box edge."""
    a = np.abs(np.asarray(density)).reshape(grid.shape)
    total = a.sum()
    if total == 0:
        return 0.0
    core = a[(slice(shell + 1, grid.n - shell),) * grid.d]
    return float((total - core.sum()) / total)


# -- binary snapshots --------------------------------------------------------

MAGIC = b"SCHL"
VERSION = 1
_HEADER = struct.Struct("<4sHHIdBdH1x")
assert _HEADER.size == 32


def write_field(fp: BinaryIO, f: Field, extra_L: float = 0.0, extra_n: int = 0) -> None:
    """32-byte header then little-endian interleaved (re, im) f64 samples.

    The last 11 header bytes are padding for plain fields; phase-space
    distributions store their momentum-axis (L, n) there.
    """
    g = f.grid
    fp.write(_HEADER.pack(MAGIC, VERSION, g.d, g.n, g.L, 0 if f.space == POSITION else 1, extra_L, extra_n))
    fp.write(np.ascontiguousarray(f.values, dtype="<c16").tobytes())


def read_header(fp: BinaryIO) -> dict:
    raw = fp.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError("truncated snapshot header")
    magic, version, d, n, L, space, extra_L, extra_n = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    return dict(d=d, n=n, L=L, space=POSITION if space == 0 else FREQUENCY, extra_L=extra_L, extra_n=extra_n)


def read_field(fp: BinaryIO) -> Field:
    h = read_header(fp)
    g = Grid(h["d"], h["n"], h["L"])
    data = np.frombuffer(fp.read(16 * g.size), dtype="<c16")
    if data.size != g.size:
        raise ValueError("truncated snapshot payload")
    return Field(g, data.reshape(g.shape).astype(complex), h["space"])
