"""Estimates harness: density ledgers, decay fits, dispersive constants,
wave-operator norms, modified-scattering residuals and hbar sweeps."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import Field, Grid, apply_symbol, boundary_mass_fraction, forward_array, make_grid, to_fft_order
from .operators import (
    LowRankOperator,
    density_array,
    hermitian_eig,
    operator_norm,
    x_sigma_norm,
)
from .propagators import (
    BOUNDARY_TOL,
    PotentialSpec,
    Trajectory,
    _ledger_row,
    MeanField,
    free_array,
    hartree_evolve,
    modified_profile,
    orbital_density,
)

Y_COMPONENTS = ("rho_L1", "rho_Linf", "grad_L1", "grad_Linf", "grad_FL1", "hess_L2")


def japanese(t) -> np.ndarray:
    return np.sqrt(1.0 + np.asarray(t, dtype=float) ** 2)


# -- density ledger -------------------------------------------------------------

def check_ab(a: float, b: float) -> None:
    if not (7 * b / 8 < a < b):
        raise ValueError(f"need 7b/8 < a < b, got a={a}, b={b}")


def y_components(rho: np.ndarray, grid: Grid, t: float, hbar: float, a: float = 0.036,
                 b: float = 0.04) -> dict:
    """The six time-weighted density norms at time ``t``."""
    check_ab(a, b)
    d = grid.d
    rho = np.real(rho)
    R = np.fft.fftn(rho)
    ks = grid.derivative_symbols()
    grads = [np.real(np.fft.ifftn(k * R)) for k in ks]
    gmag = np.sqrt(sum(gr**2 for gr in grads))
    # |xi| |F rho| on the sorted frequency lattice, under the unitary convention
    Frho = forward_array(rho.astype(complex), grid)
    fl1 = float(np.sum(np.sqrt(grid.xi2()) * np.abs(Frho)) * grid.dxi**d)
    hess2 = float(np.sum(grid.xi2() ** 2 * np.abs(Frho) ** 2) * grid.dxi**d)
    jt = float(japanese(t))
    return {
        "rho_L1": float(np.sum(np.abs(rho)) * grid.cell),
        "rho_Linf": jt**d * float(np.abs(rho).max()),
        "grad_L1": jt ** (1 - a) * float(np.sum(gmag) * grid.cell),
        "grad_Linf": jt ** (d + 1 - a) * float(gmag.max()),
        "grad_FL1": jt ** (d + 1 - a) * hbar**1.5 * fl1,
        "hess_L2": jt ** (d + 0.5 - b) * float(np.sqrt(hess2)),
    }


def norm_ledger_series(traj: Trajectory, a: float = 0.036, b: float = 0.04) -> list[dict]:
    """One row per stamp: time, raw ``sup rho`` and the six weighted components."""
    check_ab(a, b)
    rows = []
    for t, A in zip(traj.times, traj.snapshots):
        rho = density_array(A)
        row = {"t": float(t), "rho_sup": float(np.abs(rho).max())}
        row.update(y_components(rho, traj.grid, t, traj.hbar, a, b))
        rows.append(row)
    return rows


def free_trajectory(gamma0: LowRankOperator, times: Sequence[float]) -> Trajectory:
    """Exact free evolution sampled at ``times`` (no stepping), in trajectory form."""
    g, hbar = gamma0.grid, gamma0.hbar
    traj = Trajectory(g, hbar, 0.0, PotentialSpec.gaussian(0.0))
    orbs, occ = hermitian_eig(gamma0)
    mf = MeanField(traj.potential, g, check=False)
    traj.flags.update({"boundary_contaminated": False, "far_field": "zero"})
    zero = np.zeros(g.shape)
    for t in times:
        u = free_array(orbs, g, t, hbar)
        rho = orbital_density(u, occ, g, hbar)
        traj.times.append(float(t))
        traj.steps.append(0)
        traj.snapshots.append(LowRankOperator.from_orbitals(g, hbar, u, occ))
        traj.potentials.append(zero)
        traj.phases.append(zero)
        traj.ledger.append(_ledger_row(t, u, occ, rho, zero, mf, g, hbar))
        if boundary_mass_fraction(rho, g) > BOUNDARY_TOL:
            traj.flags["boundary_contaminated"] = True
    return traj


# -- decay fits -------------------------------------------------------------------

ABSCISSAE = ("t", "japanese")


@dataclass(frozen=True)
class DecayFit:
    """``value ~ constant * s^exponent`` with ``s = t`` or ``<t>``, fitted in log-log."""

    window: tuple
    exponent: float
    constant: float
    residual: float
    points: int
    abscissa: str = "t"

    def predict(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=float) if self.abscissa == "t" else japanese(t)
        return self.constant * s**self.exponent


def decay_fit(t, values, window: tuple = (5.0, 40.0), abscissa: str = "t",
              min_points: int = 8) -> DecayFit:
    """Least squares on ``(log s, log value)`` inside ``window``; ``residual`` is the sum of squares."""
    if abscissa not in ABSCISSAE:
        raise ValueError(f"abscissa must be one of {ABSCISSAE}")
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    ts, vs = t[sel], v[sel]
    if ts.size < min_points:
        raise ValueError(f"need at least {min_points} points in the window, got {ts.size}")
    if np.any(vs <= 0) or not np.all(np.isfinite(vs)):
        raise ValueError("decay fit needs positive finite values")
    s = ts if abscissa == "t" else japanese(ts)
    X = np.stack([np.log(s), np.ones_like(s)], axis=1)
    coef, *_ = np.linalg.lstsq(X, np.log(vs), rcond=None)
    res = float(np.sum((X @ coef - np.log(vs)) ** 2))
    return DecayFit((float(window[0]), float(window[1])), float(coef[0]), float(np.exp(coef[1])),
                    res, int(ts.size), abscissa)


# -- dispersive constant ------------------------------------------------------------

def probe_grid(hbar: float, t_max: float, n: int = 2048, L_min: float = 80.0) -> Grid:
    """Lattice on which a ``2 dx`` probe spread for ``t_max`` stays clear of its periodic images."""
    L = max(L_min, float(np.sqrt(2.5 * n * t_max * hbar)))
    return make_grid(1, n, L)


def phase_from_trajectory(traj: Trajectory) -> Callable[[float, np.ndarray], np.ndarray]:
    """``Psi(t, p)`` read off the stored phases by linear interpolation in momentum."""
    p_traj = traj.hbar * traj.grid.frequency_axis()
    if traj.grid.d != 1:
        raise ValueError("phase interpolation onto a probe lattice is implemented for d = 1")

    def psi(t: float, p: np.ndarray) -> np.ndarray:
        return np.interp(p, p_traj, np.asarray(traj.phase(t)).reshape(-1))

    return psi


def dispersive_constant(times: Sequence[float], hbar: float, grid: Grid,
                        phase: Callable[[float, np.ndarray], np.ndarray] | None = None,
                        probe_width: float | None = None, detail: bool = False):
    """``max_t (t hbar)^{d/2} sup |U(t) e^{-i Psi(t, -i hbar grad)} u|`` for an L1-normalized probe ``u``.

    The probe is a Gaussian of width ``probe_width`` (default ``2 dx``) at the origin.
    ``phase(t, p)`` returns ``Psi`` at momenta ``p``; ``None`` means ``Psi = 0``.
    """
    dx = grid.dx
    w = 2 * dx if probe_width is None else probe_width
    if w > 8 * dx:
        raise ValueError(f"probe width {w:.3g} exceeds 8 dx = {8 * dx:.3g}")
    if w > 4 * dx:
        warnings.warn("probe wider than 4 dx; the estimate is biased low", RuntimeWarning, stacklevel=2)
    d = grid.d
    r2 = np.broadcast_to(grid.radius2(), grid.shape)
    u = np.exp(-r2 / (2 * w**2)) / (np.sqrt(2 * np.pi) * w) ** d
    mom = [hbar * k for k in grid.fft_frequencies()]
    values = []
    for t in times:
        if not t * hbar > 0:
            raise ValueError("dispersive constant needs t hbar > 0")
        v = u.astype(complex)
        if phase is not None:
            sym = np.exp(-1j * phase(t, mom[0] if d == 1 else np.stack(mom, -1)))
            v = apply_symbol(v, sym, grid)
        v = free_array(v, grid, t, hbar)
        values.append(float((t * hbar) ** (d / 2) * np.abs(v).max()))
    best = max(values)
    return (best, values) if detail else best


def free_dispersive_limit(d: int = 1) -> float:
    return (2 * np.pi) ** (-d / 2)


# -- wave-operator boundedness -----------------------------------------------------

POWER_TOL = 1e-6
POWER_MIN = 20
POWER_MAX = 200


class PowerIterationError(RuntimeError):
    pass


def _orthonormalize(v: np.ndarray, cell: float) -> np.ndarray:
    m, k = v.shape[:2]
    flat = v.reshape(m, k, -1)
    out = np.empty_like(flat)
    for j in range(m):
        q, _ = np.linalg.qr(flat[j].T)
        out[j] = q.T / np.sqrt(cell)
    return out.reshape(v.shape)


def power_norm(apply: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray],
               v0: np.ndarray, cell: float, tol: float = POWER_TOL, min_iter: int = POWER_MIN,
               max_iter: int = POWER_MAX) -> np.ndarray:
    """Operator norms of a batch of maps by block power iteration on ``M* M``.

    ``v0`` has shape ``(m, k, ...)``: map ``j`` is iterated on the block
    ``v0[j]`` of ``k`` vectors (the callables act on the whole batch, with the
    map index first).  The estimate is the largest singular value of ``M``
    restricted to the current block.  Stops once every estimate changes by less
    than ``tol`` relative, after at least ``min_iter`` iterations.
    """
    v = _orthonormalize(np.array(v0, dtype=complex), cell)
    m, k = v.shape[:2]
    est = np.zeros(m)
    for it in range(1, max_iter + 1):
        Mv = apply(v)
        flat = Mv.reshape(m, k, -1)
        gram = cell * np.einsum("jan,jbn->jab", flat.conj(), flat)
        new = np.sqrt(np.maximum(np.linalg.eigvalsh(gram)[:, -1], 0.0))
        v = _orthonormalize(adjoint(Mv), cell)
        done = np.all(np.abs(new - est) <= tol * np.maximum(new, 1e-300))
        est = new
        if it >= min_iter and done:
            return est
    raise PowerIterationError(f"power iteration did not settle after {max_iter} iterations")


def smooth_start(grid: Grid, hbar: float, count: int, rng: np.random.Generator,
                 spread: float = 0.25) -> np.ndarray:
    """Random vectors with momenta of order one and support over the central part of the box."""
    shape = (count,) + grid.shape
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    damp = to_fft_order(np.exp(-0.5 * hbar**2 * grid.xi2()), grid)
    env = np.exp(-np.broadcast_to(grid.radius2(), grid.shape) / (2 * (spread * grid.L) ** 2))
    return env * apply_symbol(noise, damp, grid)


@dataclass
class WaveOperatorReport:
    times: list
    s_values: list
    corrected: dict = field(default_factory=dict)
    uncorrected: dict = field(default_factory=dict)

    @staticmethod
    def running_sup(series: Sequence[float]) -> list:
        return [float(x) for x in np.maximum.accumulate(np.asarray(series, dtype=float))]

    def sup(self, s: float, corrected: bool = True) -> float:
        src = self.corrected if corrected else self.uncorrected
        return float(max(src[s]))

    def as_dict(self) -> dict:
        out = {"t": self.times, "s": self.s_values}
        for s in self.s_values:
            out[f"corrected_s{s:g}"] = self.corrected[s]
            out[f"uncorrected_s{s:g}"] = self.uncorrected[s]
            out[f"corrected_s{s:g}_running_sup"] = self.running_sup(self.corrected[s])
            out[f"uncorrected_s{s:g}_running_sup"] = self.running_sup(self.uncorrected[s])
        return out


NORM_METHODS = ("lanczos", "power")


def matfree_norm(apply: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray],
                 grid: Grid, hbar: float, method: str = "lanczos", seed: int = 0, block: int = 4,
                 tol: float = POWER_TOL, max_iter: int = POWER_MAX) -> float:
    """Operator norm on ``L^2`` of a matrix-free map acting on arrays of the grid shape.

    ``lanczos`` runs ARPACK's Krylov iteration on ``M* M``; ``power`` runs the
    block power iteration of :func:`power_norm`.
    """
    if method not in NORM_METHODS:
        raise ValueError(f"method must be one of {NORM_METHODS}")
    rng = np.random.default_rng(seed)
    if method == "power":
        v0 = smooth_start(grid, hbar, block, rng)[None]
        return float(power_norm(lambda v: apply(v[0])[None], lambda v: adjoint(v[0])[None],
                                v0, grid.cell, tol, POWER_MIN, max_iter)[0])
    from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, svds

    N = grid.size
    op = LinearOperator((N, N), dtype=complex,
                        matvec=lambda v: apply(v.reshape(grid.shape)).reshape(-1),
                        rmatvec=lambda v: adjoint(v.reshape(grid.shape)).reshape(-1))
    v0 = smooth_start(grid, hbar, 1, rng).reshape(-1)
    try:
        sv = svds(op, k=1, tol=tol, maxiter=max_iter * N, v0=v0, return_singular_vectors=False)
    except ArpackNoConvergence as exc:
        raise PowerIterationError(str(exc)) from exc
    return float(sv[0])


def wave_operator_boundedness(traj: Trajectory, s_values: Sequence[float] = (1.0,),
                              times: Sequence[float] | None = None, seed: int = 0,
                              weight: str = "position", method: str = "lanczos") -> WaveOperatorReport:
    """``|| <x>^s e^{i Psi} W_V(t) <x>^{-s} ||`` with and without the phase.

    ``weight="frequency"`` tracks ``|| <hbar grad>^s W_V(t) <hbar grad>^{-s} ||``
    instead; the phase commutes with that weight, so both series coincide.
    """
    for s in s_values:
        if not 0 <= s <= 2:
            raise ValueError("s must lie in [0, 2]")
    if weight not in ("position", "frequency"):
        raise ValueError("weight must be 'position' or 'frequency'")
    g, hbar = traj.grid, traj.hbar
    times = list(traj.times) if times is None else list(times)
    report = WaveOperatorReport([float(t) for t in times], [float(s) for s in s_values])
    for s in s_values:
        report.corrected[float(s)] = []
        report.uncorrected[float(s)] = []
    if weight == "position":
        jx = japanese(np.sqrt(np.broadcast_to(g.radius2(), g.shape)))
    else:
        jx = to_fft_order(japanese(hbar * np.sqrt(g.xi2())), g)

    def norm(t: float, s: float, phase: np.ndarray | None) -> float:
        fwd, inv = jx**s, jx ** (-s)
        if weight == "frequency":
            def apply(v):
                return apply_symbol(traj.wave(apply_symbol(v, inv, g), t), fwd, g)

            def adjoint(v):
                return apply_symbol(traj.wave(apply_symbol(v, fwd, g), t, adjoint=True), inv, g)
        elif phase is None:
            def apply(v):
                return fwd * traj.wave(inv * v, t)

            def adjoint(v):
                return inv * traj.wave(fwd * v, t, adjoint=True)
        else:
            def apply(v):
                return fwd * apply_symbol(traj.wave(inv * v, t), phase, g)

            def adjoint(v):
                return inv * traj.wave(apply_symbol(fwd * v, phase.conj(), g), t, adjoint=True)

        return matfree_norm(apply, adjoint, g, hbar, method, seed)

    for t in times:
        ph = np.exp(1j * to_fft_order(np.asarray(traj.phase(t)).reshape(g.shape), g))
        for s in s_values:
            c = norm(t, s, ph)
            u = c if weight == "frequency" else norm(t, s, None)
            report.corrected[float(s)].append(c)
            report.uncorrected[float(s)].append(u)
    return report


# -- modified scattering -----------------------------------------------------------

@dataclass
class ScatteringReport:
    pairs: list
    residuals: list
    rate: float | None

    @property
    def strictly_decreasing(self) -> bool:
        r = self.residuals
        return all(b < a for a, b in zip(r, r[1:]))

    def as_dict(self) -> dict:
        return {"pairs": self.pairs, "residuals": self.residuals, "rate": self.rate,
                "strictly_decreasing": self.strictly_decreasing}


def dyadic_pairs(t0: float, t_max: float) -> list[tuple[float, float]]:
    out, t = [], t0
    while 2 * t <= t_max * (1 + 1e-12):
        out.append((t, 2 * t))
        t *= 2
    return out


def scattering_residual(traj: Trajectory, pairs: Sequence[tuple[float, float]],
                        with_phase: bool = True) -> ScatteringReport:
    """``|| profile(t2) - profile(t1) ||_B`` for each pair; rate is the log-log slope in ``t1``."""
    res = []
    for t1, t2 in pairs:
        if t2 < t1:
            raise ValueError("pairs must satisfy t1 <= t2")
        if t1 == t2:
            res.append(0.0)
            continue
        diff = modified_profile(traj, t2, with_phase) - modified_profile(traj, t1, with_phase)
        res.append(float(operator_norm(diff)))
    rate = None
    t1s = np.array([p[0] for p in pairs], dtype=float)
    r = np.asarray(res)
    if len(pairs) >= 2 and np.all(r > 0) and np.all(t1s > 0):
        rate = float(np.polyfit(np.log(t1s), np.log(r), 1)[0])
    return ScatteringReport([tuple(map(float, p)) for p in pairs], res, rate)


# -- hbar sweeps --------------------------------------------------------------------

@dataclass
class SweepMember:
    hbar: float
    rank: int
    fit: DecayFit
    weighted_sup: float
    x_sigma: float
    boundary_contaminated: bool
    series: list = field(default_factory=list)


@dataclass
class SweepReport:
    hbars: list
    members: list
    threshold: float
    control: dict | None = None
    flags: dict = field(default_factory=dict)

    @staticmethod
    def _ratio(vals: Sequence[float]) -> float:
        v = np.asarray(vals, dtype=float)
        return float(v.max() / v.min())

    @property
    def uniformity_ratio(self) -> float:
        """max/min across hbar of ``sup_t <t>^d ||rho||_inf``."""
        return self._ratio([m.weighted_sup for m in self.members])

    @property
    def constant_ratio(self) -> float:
        return self._ratio([m.fit.constant for m in self.members])

    @property
    def x_sigma_ratio(self) -> float:
        return self._ratio([m.x_sigma for m in self.members])

    @property
    def tainted(self) -> bool:
        return any(m.boundary_contaminated for m in self.members)

    @property
    def passing(self) -> bool:
        return (not self.tainted) and self.uniformity_ratio <= self.threshold

    def to_json(self, config_text: str | None = None) -> str:
        out = {
            "hbars": self.hbars,
            "threshold": self.threshold,
            "uniformity_ratio": self.uniformity_ratio,
            "constant_ratio": self.constant_ratio,
            "x_sigma_ratio": self.x_sigma_ratio,
            "tainted": self.tainted,
            "passing": self.passing,
            "members": [{k: (asdict(v) if isinstance(v, DecayFit) else v)
                         for k, v in asdict(m).items() if k != "series"} for m in self.members],
            "control": self.control,
            "flags": self.flags,
        }
        if config_text is not None:
            out["config"] = config_text
        return json.dumps(out, indent=2, sort_keys=True)


def rank_one_control(u0: np.ndarray, grid: Grid, hbars: Sequence[float], times: Sequence[float]) -> dict:
    """Sup over ``times`` of ``<t>^d ||rho(t)||_inf`` for ``(2 pi hbar)^{-d} |u0><u0|`` at each hbar."""
    sups = []
    for hbar in hbars:
        A = LowRankOperator.rank_one(Field(grid, u0), None, hbar, (2 * np.pi * hbar) ** (-grid.d))
        tr = free_trajectory(A, times)
        sups.append(max(japanese(t) ** grid.d * row["rho_sup"] for t, row in zip(tr.times, tr.ledger)))
    sups = [float(s) for s in sups]
    return {"hbars": list(map(float, hbars)), "weighted_sup": sups, "ratio": max(sups) / min(sups)}


def hbar_sweep(quantize: Callable[[float], LowRankOperator], hbars: Sequence[float],
               times: Sequence[float], w: PotentialSpec | None = None, dt: float = 0.05,
               window: tuple = (5.0, 40.0), sigma: float = 1.6, threshold: float = 2.0,
               control_state: np.ndarray | None = None, abscissa: str = "t",
               keep: Callable[[float, Trajectory], None] | None = None) -> SweepReport:
    """Quantize, evolve, ledger and fit at each hbar.

    ``quantize(hbar)`` builds the initial operator.  ``times`` are the stamps;
    interacting runs step with ``dt`` and must have ``times`` on the step
    lattice with a common spacing.  ``keep(hbar, traj)`` sees each member run.
    """
    hb = [float(h) for h in hbars]
    if any(not 0 < h <= 1 for h in hb):
        raise ValueError("hbar values must lie in (0, 1]")
    if any(b >= a for a, b in zip(hb, hb[1:])):
        raise ValueError("hbar list must be strictly descending")
    members = []
    grid = None
    for h in hb:
        g0 = quantize(h)
        grid = g0.grid
        if w is None or w.is_zero:
            traj = free_trajectory(g0, times)
        else:
            spacing = times[1] - times[0]
            stride = max(1, int(round(spacing / dt)))
            traj = hartree_evolve(g0, w, times[-1], dt, stride=stride)
        if keep is not None:
            keep(h, traj)
        jt = japanese(traj.times) ** grid.d
        sups = np.array([row["rho_sup"] for row in traj.ledger])
        fit = decay_fit(traj.times, sups, window, abscissa)
        members.append(SweepMember(h, int(g0.rank_bound), fit, float(np.max(jt * sups)),
                                   float(x_sigma_norm(g0, sigma).total),
                                   bool(traj.flags.get("boundary_contaminated")),
                                   [float(x) for x in sups]))
    report = SweepReport(hb, members, threshold)
    if control_state is not None:
        report.control = rank_one_control(control_state, grid, hb, times)
    report.flags["tainted"] = report.tainted
    return report
