"""Free, external-potential and self-consistent Hartree propagation.

The linear flow is Strang-split: half potential kick, exact free step in
Fourier space, half kick.  Hartree data are evolved orbital by orbital under
the common mean field ``V = w * rho``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from .grid import (
    FREQUENCY,
    POSITION,
    Field,
    Grid,
    apply_symbol,
    boundary_mass_fraction,
    convolve_array,
    interpolate_scaled_lattice,
    read_field,
    to_fft_order,
    write_field,
)
from .operators import (
    LowRankOperator,
    hermitian_eig,
    read_operator,
    write_operator,
)

BOUNDARY_TOL = 1e-6
KINDS = ("regularized-coulomb", "gaussian", "custom")
PHASE_RULES = ("midpoint", "left")


class BoundaryContamination(RuntimeError):
    """Mass reached the periodic boundary shell."""


# -- interaction kernels -----------------------------------------------------

@dataclass(frozen=True)
class PotentialSpec:
    """Pair interaction ``w``.

    ``regularized-coulomb``: ``kappa <x>^{-1}``; ``gaussian``:
    ``kappa exp(-|x|^2 / (2 width^2))``; ``custom``: sampled values.
    """

    kind: str = "regularized-coulomb"
    kappa: float = 0.0
    width: float = 1.0
    samples: Field | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "custom" and self.samples is None:
            raise ValueError("custom potential needs sampled values")
        if self.kind == "gaussian" and not self.width > 0:
            raise ValueError("gaussian width must be positive")

    @classmethod
    def regularized_coulomb(cls, kappa: float) -> "PotentialSpec":
        return cls("regularized-coulomb", float(kappa))

    @classmethod
    def gaussian(cls, kappa: float, width: float = 1.0) -> "PotentialSpec":
        return cls("gaussian", float(kappa), float(width))

    @classmethod
    def custom(cls, samples: Field) -> "PotentialSpec":
        return cls("custom", 1.0, 1.0, samples)

    @property
    def is_zero(self) -> bool:
        if self.kind == "custom":
            return not np.any(self.samples.values)
        return self.kappa == 0.0

    def kernel(self, grid: Grid) -> np.ndarray:
        if self.kind == "custom":
            if self.samples.grid != grid:
                raise ValueError("custom potential sampled on a different grid")
            return self.samples.values.real.copy()
        r2 = np.broadcast_to(grid.radius2(), grid.shape)
        if self.kind == "regularized-coulomb":
            return self.kappa / np.sqrt(1.0 + r2)
        return self.kappa * np.exp(-r2 / (2 * self.width**2))

    @property
    def far_field_rule(self) -> str:
        return {"regularized-coulomb": "coulomb-tail", "gaussian": "zero",
                "custom": "zero-flagged"}[self.kind]

    def far_field(self, mass: float) -> Callable[[np.ndarray], np.ndarray] | None:
        """Value of ``w * rho`` outside the box: ``kappa m / |x|`` for the Coulomb tail."""
        if self.kind != "regularized-coulomb":
            return None
        k = self.kappa * mass
        return lambda pts: k / np.linalg.norm(np.atleast_2d(pts), axis=-1)

    def assumption_constants(self, grid: Grid) -> dict:
        """Finite-difference constants ``max |d^a w| <x>^{1+a}`` along each axis, a <= 3."""
        w = self.kernel(grid)
        r2 = np.broadcast_to(grid.radius2(), grid.shape)
        out = {}
        for a in range(grid.d):
            deriv = w
            for order in range(4):
                if order:
                    deriv = (np.roll(deriv, -1, axis=a) - np.roll(deriv, 1, axis=a)) / (2 * grid.dx)
                interior = [slice(None)] * grid.d
                interior[a] = slice(2 * order, grid.n - 2 * order)
                val = np.abs(deriv[tuple(interior)]) * (1 + r2[tuple(interior)]) ** ((1 + order) / 2)
                out[f"axis{a}_order{order}"] = max(out.get(f"axis{a}_order{order}", 0.0), float(val.max()))
        return out

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "kappa": self.kappa, "width": self.width,
               "far_field": self.far_field_rule}
        return out

    @classmethod
    def from_dict(cls, raw: dict, samples: Field | None = None) -> "PotentialSpec":
        return cls(raw["kind"], float(raw.get("kappa", 0.0)), float(raw.get("width", 1.0)), samples)


class MeanField:
    """``w`` bound to a grid: cached kernel, potentials and interaction energy."""

    def __init__(self, spec: PotentialSpec, grid: Grid, check: bool = True):
        self.spec = spec
        self.grid = grid
        self.w = spec.kernel(grid)
        self.constants = spec.assumption_constants(grid) if check and spec.kind != "custom" else {}
        bound = 1e3 * (abs(spec.kappa) + 1.0) / min(1.0, spec.width if spec.kind == "gaussian" else 1.0) ** 3
        for k, v in self.constants.items():
            if not np.isfinite(v) or v > bound:
                raise ValueError(f"kernel violates the decay assumption ({k} = {v:.3g})")

    def potential(self, rho: np.ndarray) -> np.ndarray:
        if self.spec.is_zero:
            return np.zeros(self.grid.shape)
        return convolve_array(self.w, rho, self.grid).real

    def interaction_energy(self, rho: np.ndarray, V: np.ndarray | None = None) -> float:
        V = self.potential(rho) if V is None else V
        return 0.5 * float(np.sum(V * rho.real) * self.grid.cell)


# -- free and linear flows ----------------------------------------------------

def kinetic_symbol(grid: Grid, t: float, hbar: float) -> np.ndarray:
    """``exp(-i t hbar |xi|^2 / 2)`` in FFT order."""
    return np.exp(-0.5j * t * hbar * grid.xi2(fft_order=True))


def free_array(values: np.ndarray, grid: Grid, t: float, hbar: float) -> np.ndarray:
    if t == 0:
        return np.array(values, dtype=complex)
    return apply_symbol(values, kinetic_symbol(grid, t, hbar), grid)


def free_propagate(u: Field, t: float, hbar: float) -> Field:
    """``U(t) u`` with ``U(t) = exp(i t hbar Laplacian / 2)``."""
    if u.space != POSITION:
        raise ValueError("free propagation acts on position-space fields")
    return Field(u.grid, free_array(u.values, u.grid, t, hbar))


class StrangStepper:
    """Kick-drift-kick steps; kinetic symbols cached per step size."""

    def __init__(self, grid: Grid, hbar: float):
        self.grid = grid
        self.hbar = hbar
        self._kin: dict[float, np.ndarray] = {}

    def kinetic(self, dt: float) -> np.ndarray:
        s = self._kin.get(dt)
        if s is None:
            s = self._kin[dt] = kinetic_symbol(self.grid, dt, self.hbar)
        return s

    def step(self, U: np.ndarray, V: np.ndarray, dt: float) -> np.ndarray:
        kick = np.exp(-0.5j * dt * V / self.hbar)
        return kick * apply_symbol(kick * U, self.kinetic(dt), self.grid)

    def unstep(self, U: np.ndarray, V: np.ndarray, dt: float) -> np.ndarray:
        """Exact inverse (adjoint) of :meth:`step`."""
        kick = np.exp(0.5j * dt * V / self.hbar)
        return kick * apply_symbol(kick * U, self.kinetic(dt).conj(), self.grid)


def step_schedule(t0: float, t1: float, dt: float) -> list[tuple[float, float]]:
    """(start, length) pairs; the last step is shortened when dt does not divide."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    span = t1 - t0
    if span < 0:
        raise ValueError("evolution runs forward in time only")
    m = max(0, math.ceil(span / dt - 1e-9))
    out = []
    for j in range(m):
        a = t0 + j * dt
        out.append((a, min(dt, t1 - a)))
    return out


def _potential_at(V, t: float, grid: Grid) -> np.ndarray:
    if callable(V):
        V = V(t)
    if isinstance(V, Field):
        V = V.values
    return np.broadcast_to(np.real(V), grid.shape)


def evolve_external(u: Field, V, t0: float, t1: float, dt: float, hbar: float,
                    strict: bool = False) -> Field:
    """``U_V(t1, t0) u`` by Strang splitting with ``V`` sampled at step midpoints.

    ``V`` is a Field, an array, a constant, or a callable of time returning one
    of those.  Boundary contamination warns, or raises when ``strict``.
    """
    g = u.grid
    st = StrangStepper(g, hbar)
    vals = np.array(u.values, dtype=complex)
    for a, h in step_schedule(t0, t1, dt):
        vals = st.step(vals, _potential_at(V, a + h / 2, g), h)
    frac = boundary_mass_fraction(np.abs(vals) ** 2, g)
    if frac > BOUNDARY_TOL:
        msg = f"boundary-contaminated: shell mass fraction {frac:.2e}"
        if strict:
            raise BoundaryContamination(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return Field(g, vals)


# -- phase correction ----------------------------------------------------------

def phase_increment(V: Field, tau: float, dt: float, hbar: float, far_field=None) -> np.ndarray:
    """``(dt/hbar) V(tau, tau hbar xi_k)`` on the sorted frequency lattice."""
    g = V.grid
    vals = interpolate_scaled_lattice(V, tau * hbar * g.dxi, far_field)
    return (dt / hbar) * vals.real


def accumulate_phase(psi: Field, V: Field, t_m: float, dt: float, hbar: float,
                     far_field=None, rule: str = "midpoint") -> Field:
    """One quadrature step of ``Psi(t, xi) = (1/hbar) int_0^t V(tau, tau xi) dtau``.

    ``Psi`` is stored as the symbol of ``Psi(t, -i hbar grad)``, i.e. its values
    at the momenta ``hbar xi_k``.  ``V`` is the potential at the quadrature node.
    """
    if rule not in PHASE_RULES:
        raise ValueError(f"phase rule must be one of {PHASE_RULES}")
    if V.space != POSITION:
        raise ValueError("potential must be position-space")
    tau = t_m + dt / 2 if rule == "midpoint" else t_m
    inc = phase_increment(V, tau, dt, hbar, far_field)
    return Field(psi.grid, psi.values.real + inc, FREQUENCY)


# -- energies and densities ------------------------------------------------------

def orbital_density(orbitals: np.ndarray, occ: np.ndarray, grid: Grid, hbar: float) -> np.ndarray:
    scale = (2 * np.pi * hbar) ** grid.d
    return scale * np.tensordot(occ, np.abs(orbitals) ** 2, axes=(0, 0))


def kinetic_energy(orbitals: np.ndarray, occ: np.ndarray, grid: Grid, hbar: float) -> float:
    """``(2 pi hbar)^d sum a_n (hbar^2/2) ||grad u_n||^2`` via Parseval."""
    ax = tuple(range(1, grid.d + 1))
    U = sfft.fftn(orbitals, axes=ax)
    per = np.sum(np.abs(U) ** 2 * grid.xi2(fft_order=True), axis=ax) * grid.cell / grid.size
    return float((2 * np.pi * hbar) ** grid.d * 0.5 * hbar**2 * np.dot(occ, per))


def energy(gamma: LowRankOperator, w: PotentialSpec) -> float:
    """Hartree energy of a hermitian operator."""
    orbs, occ = hermitian_eig(gamma)
    mf = MeanField(w, gamma.grid, check=False)
    rho = orbital_density(orbs, occ, gamma.grid, gamma.hbar)
    return kinetic_energy(orbs, occ, gamma.grid, gamma.hbar) + mf.interaction_energy(rho)


# -- Hartree trajectories ----------------------------------------------------------

@dataclass
class Trajectory:
    grid: Grid
    hbar: float
    dt: float
    potential: PotentialSpec
    phase_rule: str = "midpoint"
    times: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    potentials: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    step_potentials: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    stride: int = 1

    @property
    def horizon(self) -> float:
        return self.times[-1] if self.times else 0.0

    def stamp(self, t: float) -> int:
        """Index of the stamp at time ``t`` (to within 1e-9)."""
        for i, s in enumerate(self.times):
            if abs(s - t) <= 1e-9 * max(1.0, abs(t)):
                return i
        raise ValueError(f"t={t} is not a trajectory stamp")

    def snapshot(self, t: float) -> LowRankOperator:
        return self.snapshots[self.stamp(t)]

    def phase(self, t: float) -> np.ndarray:
        return self.phases[self.stamp(t)]

    def stepper(self) -> StrangStepper:
        st = getattr(self, "_stepper", None)
        if st is None:
            st = StrangStepper(self.grid, self.hbar)
            object.__setattr__(self, "_stepper", st)
        return st

    def replay(self, vecs: np.ndarray, m1: int, m0: int = 0) -> np.ndarray:
        """Apply the stored linear flow ``U_V`` from step ``m0`` to step ``m1``."""
        st = self.stepper()
        out = np.array(vecs, dtype=complex)
        if m1 >= m0:
            for j in range(m0, m1):
                out = st.step(out, self.step_potentials[j], self.step_times[j][1])
        else:
            for j in range(m0 - 1, m1 - 1, -1):
                out = st.unstep(out, self.step_potentials[j], self.step_times[j][1])
        return out

    def wave(self, vecs: np.ndarray, t: float, adjoint: bool = False) -> np.ndarray:
        """``W_V(t) = U(-t) U_V(t)`` (or its adjoint) on a batch of vectors."""
        m = self.steps[self.stamp(t)]
        if adjoint:
            return self.replay(free_array(vecs, self.grid, t, self.hbar), 0, m)
        return free_array(self.replay(vecs, m), self.grid, -t, self.hbar)

    def ledger_columns(self) -> list[str]:
        cols = []
        for row in self.ledger:
            for k in row:
                if k not in cols:
                    cols.append(k)
        return cols


def _ledger_row(t, orbs, occ, rho, V, mf, grid, hbar) -> dict:
    kin = kinetic_energy(orbs, occ, grid, hbar)
    inter = mf.interaction_energy(rho, V)
    return {
        "t": round(float(t), 12),
        "mass": float(np.sum(rho.real) * grid.cell),
        "energy": kin + inter,
        "kinetic": kin,
        "interaction": inter,
        "rho_sup": float(np.max(np.abs(rho))),
        "boundary": boundary_mass_fraction(rho, grid),
    }


def hartree_evolve(gamma0: LowRankOperator, w: PotentialSpec, T: float, dt: float,
                   stride: int = 1, phase_rule: str = "midpoint",
                   resume: Trajectory | None = None,
                   boundary_tol: float = BOUNDARY_TOL) -> Trajectory:
    """Self-consistent evolution ``gamma(t) = U_V(t) gamma0 U_V(t)*`` with ``V = w * rho``.

    Each step: half step with ``V(t_m)`` to predict the midpoint density, then
    one full Strang step with the midpoint potential.  ``Psi`` is accumulated
    online with the same midpoint potential.  Passing ``resume`` continues a
    trajectory from its last stamp and extends it in place.
    """
    if phase_rule not in PHASE_RULES:
        raise ValueError(f"phase rule must be one of {PHASE_RULES}")
    if stride < 1:
        raise ValueError("snapshot stride must be >= 1")
    g, hbar = gamma0.grid, gamma0.hbar
    mf = MeanField(w, g)
    st = StrangStepper(g, hbar)
    if resume is None:
        if not gamma0.hermitian:
            raise ValueError("initial data must be hermitian")
        orbs, occ = hermitian_eig(gamma0)
        rho = orbital_density(orbs, occ, g, hbar)
        frac = boundary_mass_fraction(rho, g)
        if frac >= boundary_tol:
            raise BoundaryContamination(f"initial boundary mass fraction {frac:.2e}")
        traj = Trajectory(g, hbar, dt, w, phase_rule, stride=stride)
        traj.flags.update({"boundary_contaminated": False,
                           "far_field": w.far_field_rule,
                           "far_field_custom": w.kind == "custom",
                           "assumption_constants": mf.constants})
        psi = np.zeros(g.shape)
        V = mf.potential(rho)
        traj.times.append(0.0)
        traj.steps.append(0)
        traj.snapshots.append(LowRankOperator.from_orbitals(g, hbar, orbs, occ))
        traj.potentials.append(V)
        traj.phases.append(psi.copy())
        traj.ledger.append(_ledger_row(0.0, orbs, occ, rho, V, mf, g, hbar))
        m0, t = 0, 0.0
    else:
        traj = resume
        if traj.flags.get("boundary_contaminated"):
            return traj
        last = traj.snapshots[-1]
        orbs = np.array(last.left)
        occ = np.real(np.diag(last.coef))
        psi = np.array(traj.phases[-1])
        m0, t = traj.steps[-1], traj.times[-1]
        del traj.step_potentials[m0:]
        del traj.step_times[m0:]
        rho = orbital_density(orbs, occ, g, hbar)
        V = mf.potential(rho)
    mass = float(np.sum(rho.real) * g.cell)
    far = w.far_field(mass)
    sched = step_schedule(0.0, T, dt)
    for m in range(m0, len(sched)):
        a, h = sched[m]
        half = st.step(orbs, V, h / 2)
        V_mid = mf.potential(orbital_density(half, occ, g, hbar))
        orbs = st.step(orbs, V_mid, h)
        traj.step_potentials.append(V_mid)
        traj.step_times.append((a, h))
        V_node = V_mid if phase_rule == "midpoint" else V
        if not w.is_zero:
            psi = psi + phase_increment(Field(g, V_node), a + h / 2 if phase_rule == "midpoint" else a,
                                        h, hbar, far)
        rho = orbital_density(orbs, occ, g, hbar)
        V = mf.potential(rho)
        t = a + h
        frac = boundary_mass_fraction(rho, g)
        contaminated = frac > boundary_tol
        if (m + 1) % stride == 0 or m + 1 == len(sched) or contaminated:
            traj.times.append(round(t, 12))
            traj.steps.append(m + 1)
            traj.snapshots.append(LowRankOperator.from_orbitals(g, hbar, orbs.copy(), occ))
            traj.potentials.append(V)
            traj.phases.append(psi.copy())
            traj.ledger.append(_ledger_row(t, orbs, occ, rho, V, mf, g, hbar))
        if contaminated:
            traj.flags["boundary_contaminated"] = True
            traj.flags["aborted_at"] = t
            break
        if not np.all(np.isfinite(rho)):
            traj.flags["diverged"] = True
            break
    return traj


# -- wave operators and profiles ---------------------------------------------------

def wave_operator_apply(u: Field, traj: Trajectory, t: float) -> Field:
    """``W_V(t) u = U(-t) U_V(t) u`` along the stored step potentials."""
    return Field(u.grid, traj.wave(u.values, t))


def profile_symbol(traj: Trajectory, t: float, with_phase: bool = True) -> np.ndarray:
    """Symbol of ``e^{i Psi(t, -i hbar grad)} U(t)*`` in FFT order."""
    g = traj.grid
    sym = np.exp(0.5j * t * traj.hbar * g.xi2())
    if with_phase:
        sym = sym * np.exp(1j * traj.phase(t))
    return to_fft_order(sym, g)


def modified_profile(traj: Trajectory, t: float, with_phase: bool = True) -> LowRankOperator:
    """``e^{i Psi} U(t)* gamma(t) U(t) e^{-i Psi}``."""
    gam = traj.snapshot(t)
    sym = profile_symbol(traj, t, with_phase)
    return gam.conjugate_by(lambda F: apply_symbol(F, sym, traj.grid))


# -- persistence -------------------------------------------------------------

def save_trajectory(traj: Trajectory, path: str | os.PathLike, config_text: str | None = None) -> Path:
    """Directory with ``manifest.json``, operator/potential/phase snapshots and ``ledger.csv``."""
    root = Path(path)
    for sub in ("snapshots", "potentials", "phases"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    g = traj.grid
    for i, (A, V, psi) in enumerate(zip(traj.snapshots, traj.potentials, traj.phases)):
        with open(root / "snapshots" / f"op_{i:05d}.bin", "wb") as fp:
            write_operator(fp, A)
        with open(root / "potentials" / f"V_{i:05d}.bin", "wb") as fp:
            write_field(fp, Field(g, V))
        with open(root / "phases" / f"psi_{i:05d}.bin", "wb") as fp:
            write_field(fp, Field(g, psi, FREQUENCY))
    if traj.step_potentials:
        np.save(root / "step_potentials.npy", np.stack(traj.step_potentials))
    else:
        np.save(root / "step_potentials.npy", np.zeros((0,) + g.shape))
    np.save(root / "step_times.npy", np.asarray(traj.step_times, dtype=float).reshape(-1, 2))
    if traj.potential.kind == "custom":
        with open(root / "kernel.bin", "wb") as fp:
            write_field(fp, traj.potential.samples)
    manifest = {
        "grid": {"d": g.d, "n": g.n, "L": g.L},
        "hbar": traj.hbar,
        "dt": traj.dt,
        "stride": traj.stride,
        "phase_rule": traj.phase_rule,
        "potential": traj.potential.to_dict(),
        "stamps": traj.times,
        "steps": traj.steps,
        "flags": traj.flags,
    }
    if config_text is not None:
        manifest["config"] = config_text
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    write_ledger_csv(root / "ledger.csv", traj.ledger)
    return root


def write_ledger_csv(path, rows: Sequence[dict]) -> None:
    cols: list[str] = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    wr.writeheader()
    for row in rows:
        wr.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})
    Path(path).write_text(buf.getvalue())


def read_ledger_csv(path) -> list[dict]:
    with open(path, newline="") as fp:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fp)]


def load_trajectory(path: str | os.PathLike) -> Trajectory:
    root = Path(path)
    man = json.loads((root / "manifest.json").read_text())
    gd = man["grid"]
    g = Grid(gd["d"], gd["n"], gd["L"])
    samples = None
    if man["potential"]["kind"] == "custom":
        with open(root / "kernel.bin", "rb") as fp:
            samples = read_field(fp)
    traj = Trajectory(g, man["hbar"], man["dt"], PotentialSpec.from_dict(man["potential"], samples),
                      man["phase_rule"], stride=man["stride"])
    traj.times = list(man["stamps"])
    traj.steps = list(man["steps"])
    traj.flags = dict(man["flags"])
    for i in range(len(traj.times)):
        with open(root / "snapshots" / f"op_{i:05d}.bin", "rb") as fp:
            traj.snapshots.append(read_operator(fp))
        with open(root / "potentials" / f"V_{i:05d}.bin", "rb") as fp:
            traj.potentials.append(read_field(fp).values.real.copy())
        with open(root / "phases" / f"psi_{i:05d}.bin", "rb") as fp:
            traj.phases.append(read_field(fp).values.real.copy())
    sp = np.load(root / "step_potentials.npy")
    traj.step_potentials = [v for v in sp]
    traj.step_times = [tuple(r) for r in np.load(root / "step_times.npy")]
    traj.ledger = read_ledger_csv(root / "ledger.csv")
    return traj
