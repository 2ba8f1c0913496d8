"""Residual checks for the commutator, factorization and Duhamel identities.

Quadrature identities are evaluated at a ladder of time steps and must show
second-order decay of the residual; spectral identities are evaluated at two
resolutions and must sit below an absolute floor at both.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .grid import Field, Grid, apply_symbol, make_grid
from .operators import LowRankOperator, commutator, density_array, recompress, schatten_norm
from .propagators import StrangStepper, free_array

SPECTRAL_FLOOR = 1e-8
ORDER_SLACK = 0.3


@dataclass(frozen=True)
class SmoothPotential:
    """External potential ``amp exp(-|x|^2/(2 width^2)) / (1 + decay t)``."""

    amp: float = 0.5
    width: float = 2.0
    decay: float = 1.0

    def value(self, t: float, grid: Grid) -> np.ndarray:
        r2 = np.broadcast_to(grid.radius2(), grid.shape)
        return self.amp * np.exp(-r2 / (2 * self.width**2)) / (1 + self.decay * t)

    def grad(self, t: float, grid: Grid, j: int) -> np.ndarray:
        return -grid.coords()[j] / self.width**2 * self.value(t, grid)

    def hess(self, t: float, grid: Grid, j: int, k: int) -> np.ndarray:
        x = grid.coords()
        delta = 1.0 if j == k else 0.0
        return (x[j] * x[k] / self.width**4 - delta / self.width**2) * self.value(t, grid)


class ExternalFlow:
    """Uniform-step Strang flow ``U_V(tau_m)`` on ``[0, T]`` with cached boundary states."""

    def __init__(self, grid: Grid, hbar: float, V: SmoothPotential, T: float, steps: int):
        self.grid, self.hbar, self.V = grid, hbar, V
        self.T, self.M = T, steps
        self.h = T / steps
        self.st = StrangStepper(grid, hbar)
        self.mid = [V.value((m + 0.5) * self.h, grid) for m in range(steps)]
        self.tau = self.h * np.arange(steps + 1)
        self.weights = np.full(steps + 1, self.h)
        self.weights[[0, -1]] = self.h / 2

    def step(self, vecs, m):
        return self.st.step(vecs, self.mid[m], self.h)

    def unstep(self, vecs, m):
        return self.st.unstep(vecs, self.mid[m], self.h)

    def forward(self, vecs: np.ndarray, m0: int = 0, m1: int | None = None) -> np.ndarray:
        m1 = self.M if m1 is None else m1
        out = np.array(vecs, dtype=complex)
        for m in range(m0, m1):
            out = self.step(out, m)
        return out

    def states(self, vecs: np.ndarray) -> list[np.ndarray]:
        out = [np.array(vecs, dtype=complex)]
        for m in range(self.M):
            out.append(self.step(out[-1], m))
        return out

    def wave(self, vecs: np.ndarray) -> np.ndarray:
        return free_array(self.forward(vecs), self.grid, -self.T, self.hbar)

    def vector_integral(self, u: np.ndarray, G: Callable[[float], np.ndarray]) -> np.ndarray:
        """``int_0^T U_V(tau)* G(tau) U_V(tau) u dtau`` by a backward Horner sweep."""
        psi = self.states(u)
        S = self.weights[-1] * G(self.tau[-1]) * psi[-1]
        for m in range(self.M - 1, -1, -1):
            S = self.unstep(S, m) + self.weights[m] * G(self.tau[m]) * psi[m]
        return S

    def operator_integral(self, K: Callable[[int, float], LowRankOperator]) -> LowRankOperator:
        """``int_0^T U_V(tau)* K(tau) U_V(tau) dtau`` with ``K`` given in the evolved frame."""
        S = K(self.M, self.tau[-1]).scaled(self.weights[-1])
        for m in range(self.M - 1, -1, -1):
            S = S.map_factors(lambda F, m=m: self.unstep(F, m), hermitian=False)
            S = recompress(S + K(m, self.tau[m]).scaled(self.weights[m]), 0.0)
        return S


def mult_commutator(A: LowRankOperator, f: np.ndarray) -> LowRankOperator:
    """``[f, A]`` for the multiplication operator by ``f``."""
    f = np.broadcast_to(f, A.grid.shape)
    k = A.coef
    Z = np.zeros_like(k)
    left = np.concatenate([f * A.left, A.left])
    right = np.concatenate([A.right, np.conj(f) * A.right])
    return A.with_factors(left, right, np.block([[k, Z], [Z, -k]]), False)


def j_commutator(A: LowRankOperator, j: int, tau: float) -> LowRankOperator:
    """``[J_j(tau), A]`` with ``J(tau) = x + i tau hbar grad``."""
    return commutator(A, "position", j) + commutator(A, "gradient", j).scaled(1j * tau * A.hbar)


def xih(A: LowRankOperator, j: int) -> LowRankOperator:
    """``[x_j / (i hbar), A]``."""
    return commutator(A, "scaled_position", j).scaled(-1j)


# -- test data ------------------------------------------------------------------

def wavepacket(grid: Grid, center, momentum, width: float = 1.0) -> np.ndarray:
    x = grid.coords()
    arg = sum((x[a] - center[a]) ** 2 for a in range(grid.d)) / (2 * width**2)
    phase = sum(momentum[a] * x[a] for a in range(grid.d))
    u = np.broadcast_to(np.exp(-arg + 1j * phase), grid.shape).astype(complex)
    return u / np.sqrt(grid.cell * np.sum(np.abs(u) ** 2))


def smooth_state(grid: Grid, hbar: float, rank: int = 2, width: float = 1.0,
                 momentum: float = 0.3) -> LowRankOperator:
    d = grid.d
    packs = [wavepacket(grid, [0.5 * (-1) ** i] * d, [momentum * (i + 1)] * d, width * (1.0 + 0.2 * i))
             for i in range(rank)]
    occ = np.linspace(0.6, 0.4, rank)
    return LowRankOperator.from_orbitals(grid, hbar, np.stack(packs), occ)


def op_residual(A: LowRankOperator, B: LowRankOperator) -> float:
    return schatten_norm(A - B, 2)


# -- spectral identities ----------------------------------------------------------

def mdfm_residual(grid: Grid, hbar: float, t: float, u: np.ndarray) -> float:
    """``|| U(t) u - M(t) D(t) F M(t) u ||`` with ``F`` summed directly at off-lattice points."""
    x = grid.coords()
    r2 = np.broadcast_to(grid.radius2(), grid.shape)
    M = np.exp(1j * r2 / (2 * t * hbar))
    g = M * u
    # F g at xi = x / (t hbar): separable direct quadrature per axis
    ax = grid.axis()
    E = np.exp(-1j * np.outer(ax / (t * hbar), ax)) * grid.dx / np.sqrt(2 * np.pi)
    Fg = g
    for a in range(grid.d):
        Fg = np.moveaxis(np.tensordot(E, Fg, axes=([1], [a])), 0, a)
    rhs = M * (1j * t * hbar) ** (-grid.d / 2) * Fg
    lhs = free_array(u, grid, t, hbar)
    return float(np.sqrt(grid.cell * np.sum(np.abs(lhs - rhs) ** 2)))


def j_residual(grid: Grid, hbar: float, t: float, u: np.ndarray) -> float:
    """``|| U(t) x U(-t) u - (x + i t hbar grad) u ||`` summed over axes."""
    tot = 0.0
    for j, (xj, s) in enumerate(zip(grid.coords(), grid.derivative_symbols())):
        lhs = free_array(xj * free_array(u, grid, -t, hbar), grid, t, hbar)
        rhs = xj * u + 1j * t * hbar * apply_symbol(u, s, grid)
        tot += np.sqrt(grid.cell * np.sum(np.abs(lhs - rhs) ** 2))
    return float(tot)


def density_derivative_residual(gamma0: LowRankOperator, t: float) -> float:
    """``|| d_j rho(U g U*) - (1/t) rho(U [x_j/(i hbar), g] U*) ||_{L^2}`` summed over axes."""
    g, hbar = gamma0.grid, gamma0.hbar
    U = lambda F: free_array(F, g, t, hbar)
    gt = gamma0.map_factors(U, U, hermitian=True)
    rho = density_array(gt)
    tot = 0.0
    for j, s in enumerate(g.derivative_symbols()):
        lhs = apply_symbol(rho, s, g)
        rhs = density_array(xih(gamma0, j).map_factors(U, U, hermitian=False)) / t
        tot += np.sqrt(g.cell * np.sum(np.abs(lhs - rhs) ** 2))
    return float(tot)


# -- quadrature identities ----------------------------------------------------------

def wave_commutator_residuals(flow: ExternalFlow, u: np.ndarray) -> dict:
    """Residuals of the position and gradient commutator formulas for ``W_V(T)``."""
    g, hbar, T = flow.grid, flow.hbar, flow.T
    Wu = flow.wave(u)
    out = {"commutator_x_W": 0.0, "commutator_nabla_W": 0.0}
    for j, (xj, s) in enumerate(zip(g.coords(), g.derivative_symbols())):
        lhs = xj * Wu - flow.wave(xj * u)
        I = flow.vector_integral(u, lambda tau: tau * flow.V.grad(tau, g, j))
        out["commutator_x_W"] += _l2(g, lhs - flow.wave(I))
        lhs = apply_symbol(Wu, s, g) - flow.wave(apply_symbol(u, s, g))
        I = flow.vector_integral(u, lambda tau: flow.V.grad(tau, g, j))
        out["commutator_nabla_W"] += _l2(g, lhs + 1j / hbar * flow.wave(I))
    return out


def _l2(g: Grid, v: np.ndarray) -> float:
    return float(np.sqrt(g.cell * np.sum(np.abs(v) ** 2)))


def _heisenberg_commutator(flow: ExternalFlow, gamma0: LowRankOperator, f) -> LowRankOperator:
    """``int U_V(tau)* [f(tau), gamma(tau)] U_V(tau) dtau = [int U_V* f U_V, gamma0]``."""
    I = flow.vector_integral(gamma0.left, f)
    return gamma0.with_factors(np.concatenate([I, gamma0.left]), np.concatenate([gamma0.left, I]),
                               np.block([[gamma0.coef, 0 * gamma0.coef], [0 * gamma0.coef, -gamma0.coef]]),
                               False)


def evolved_commutator_residuals(flow: ExternalFlow, gamma0: LowRankOperator,
                                 pairs: str = "all") -> dict:
    """Single and double commutator evolution identities for ``W gamma0 W*``.

    ``pairs`` selects the coordinate pairs of the double commutators: ``all``,
    ``diagonal`` or ``none``.
    """
    g, hbar = flow.grid, flow.hbar
    occ = np.real(np.diag(gamma0.coef))
    W = flow.wave
    Wmap = lambda A: A.map_factors(W, W, hermitian=A.hermitian)
    gW = Wmap(gamma0)
    dV = lambda tau, j: flow.V.grad(tau, g, j)
    ddV = lambda tau, j, k: flow.V.hess(tau, g, j, k)
    nab = lambda A, j: commutator(A, "gradient", j)
    out = {"nabla_single": 0.0, "weight_single": 0.0}
    for j in range(g.d):
        I = _heisenberg_commutator(flow, gamma0, lambda tau: dV(tau, j))
        rhs = Wmap(nab(gamma0, j)) + Wmap(I).scaled(-1j / hbar)
        out["nabla_single"] += op_residual(nab(gW, j), rhs)

        I = _heisenberg_commutator(flow, gamma0, lambda tau: tau * dV(tau, j))
        rhs = Wmap(xih(gamma0, j)) + Wmap(I).scaled(-1j / hbar)
        out["weight_single"] += op_residual(xih(gW, j), rhs)
    if pairs == "none":
        return out
    states = flow.states(gamma0.left)
    gam = lambda m: LowRankOperator.from_orbitals(g, hbar, states[m], occ)
    out.update({"nabla_double": 0.0, "weight_double": 0.0, "mixed_double": 0.0})
    todo = [(j, k) for j in range(g.d) for k in range(g.d) if pairs == "all" or j == k]
    for j, k in todo:
        I = flow.operator_integral(lambda m, tau: (
            mult_commutator(nab(gam(m), k), dV(tau, j))
            + mult_commutator(nab(gam(m), j), dV(tau, k))
            + mult_commutator(gam(m), ddV(tau, j, k))))
        rhs = Wmap(nab(nab(gamma0, j), k)) + Wmap(I).scaled(-1j / hbar)
        out["nabla_double"] += op_residual(nab(nab(gW, j), k), rhs)

        I1 = flow.operator_integral(lambda m, tau: (
            mult_commutator(j_commutator(gam(m), k, tau), tau * dV(tau, j))
            + mult_commutator(j_commutator(gam(m), j, tau), tau * dV(tau, k))))
        I2 = _heisenberg_commutator(flow, gamma0, lambda tau: tau**2 * ddV(tau, j, k))
        rhs = Wmap(xih(xih(gamma0, j), k)) + Wmap(I1).scaled(-1 / hbar**2) + Wmap(I2).scaled(-1j / hbar)
        out["weight_double"] += op_residual(xih(xih(gW, j), k), rhs)

        I1 = flow.operator_integral(lambda m, tau: mult_commutator(nab(gam(m), k), tau * dV(tau, j)))
        I2 = flow.operator_integral(lambda m, tau: mult_commutator(j_commutator(gam(m), j, tau), dV(tau, k)))
        I3 = _heisenberg_commutator(flow, gamma0, lambda tau: tau * ddV(tau, j, k))
        rhs = (Wmap(nab(xih(gamma0, j), k)) + Wmap(I1).scaled(-1j / hbar)
               + Wmap(I2).scaled(-1 / hbar**2) + Wmap(I3).scaled(-1j / hbar))
        out["mixed_double"] += op_residual(nab(xih(gW, j), k), rhs)
    return out


def duhamel_residual(flow: ExternalFlow, f: np.ndarray, s_step: int) -> float:
    """Residual of the interaction-picture Duhamel variant from ``s = tau_{s_step}`` to ``T``."""
    g, hbar, T = flow.grid, flow.hbar, flow.T
    s = flow.tau[s_step]
    A = LowRankOperator(g, hbar, f[None], f[None], np.ones((1, 1)), True)
    fwd = lambda F: flow.forward(F, s_step)
    lhs = A.map_factors(fwd, fwd, hermitian=True)
    free = lambda F, dt: free_array(F, g, dt, hbar)
    rhs = A.map_factors(lambda F: free(F, T - s), lambda F: free(F, T - s), hermitian=True)
    # sum_m w_m U_V(T, tau_m) [V(tau_m), U(tau_m - s) A U(s - tau_m)] U_V(tau_m, T)
    acc = None
    for m in range(s_step, flow.M + 1):
        wgt = flow.h / 2 if m in (s_step, flow.M) else flow.h
        At = A.map_factors(lambda F: free(F, flow.tau[m] - s), hermitian=True)
        term = mult_commutator(At, flow.V.value(flow.tau[m], g)).scaled(wgt)
        acc = term if acc is None else recompress(acc + term, 0.0)
        if m < flow.M:
            acc = acc.map_factors(lambda F, m=m: flow.step(F, m), hermitian=False)
    rhs = rhs + acc.scaled(-1j / hbar)
    return op_residual(lhs, rhs)


# -- suite --------------------------------------------------------------------------

SPECTRAL = ("mdfm", "J", "density_derivative")
QUADRATURE = ("commutator_x_W", "commutator_nabla_W", "nabla_single", "weight_single",
              "nabla_double", "weight_double", "mixed_double", "duhamel")
ALL_IDENTITIES = SPECTRAL + QUADRATURE


@dataclass
class IdentityConfig:
    d: int = 1
    n: int = 256
    L: float = 40.0
    hbar: float = 0.5
    t_mdfm: float = 2.0
    t_j: float = 2.0
    t_density: float = 1.0
    T: float = 1.0
    steps: tuple = (8, 16, 32)
    amp: float = 0.5
    width: float = 2.0
    pairs: str = "all"
    rank: int = 2
    packet_width: float = 1.0
    momentum: float = 0.5
    spectral_floor: float = SPECTRAL_FLOOR


@dataclass
class IdentityResult:
    name: str
    kind: str
    residuals: list
    order: float | None
    passing: bool
    refinement: list = field(default_factory=list)


@dataclass
class IdentityReport:
    config: dict
    results: dict

    @property
    def passing(self) -> bool:
        return all(r.passing for r in self.results.values())

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "passing": self.passing,
                           "results": {k: asdict(v) for k, v in self.results.items()}},
                          indent=2, sort_keys=True)


def observed_order(residuals, ratio: float = 2.0) -> float:
    r = np.asarray(residuals, dtype=float)
    if r.size < 2 or r[-1] <= 0 or r[-2] <= 0:
        return float("nan")
    return float(np.log(r[-2] / r[-1]) / np.log(ratio))


def _spectral(name: str, cfg: IdentityConfig) -> IdentityResult:
    res = []
    for n in (cfg.n, 2 * cfg.n) if cfg.d == 1 else (cfg.n,):
        g = make_grid(cfg.d, n, cfg.L)
        u = wavepacket(g, [0.3] * cfg.d, [cfg.momentum] * cfg.d, cfg.packet_width)
        if name == "mdfm":
            res.append(mdfm_residual(g, cfg.hbar, cfg.t_mdfm, u))
        elif name == "J":
            res.append(j_residual(g, cfg.hbar, cfg.t_j, u))
        else:
            gam = smooth_state(g, cfg.hbar, cfg.rank, cfg.packet_width, cfg.momentum * 0.6)
            res.append(density_derivative_residual(gam, cfg.t_density))
    ok = all(r <= cfg.spectral_floor for r in res)
    return IdentityResult(name, "spectral", res, None, ok, [cfg.n * 2**i for i in range(len(res))])


def identity_suite(cfg: IdentityConfig | None = None, suites=ALL_IDENTITIES) -> IdentityReport:
    """Evaluate the requested identities and their convergence behaviour."""
    cfg = cfg or IdentityConfig()
    unknown = set(suites) - set(ALL_IDENTITIES)
    if unknown:
        raise ValueError(f"unknown identities {sorted(unknown)}")
    results = {}
    for name in suites:
        if name in SPECTRAL:
            results[name] = _spectral(name, cfg)
    quad = [s for s in suites if s in QUADRATURE]
    if cfg.pairs == "none":
        quad = [s for s in quad if not s.endswith("_double")]
    if quad:
        g = make_grid(cfg.d, cfg.n, cfg.L)
        V = SmoothPotential(cfg.amp, cfg.width)
        u = wavepacket(g, [0.3] * cfg.d, [cfg.momentum] * cfg.d, cfg.packet_width)
        gamma0 = smooth_state(g, cfg.hbar, cfg.rank, cfg.packet_width, cfg.momentum * 0.6)
        series: dict[str, list] = {k: [] for k in quad}
        doubles = any(k in quad for k in ("nabla_double", "weight_double", "mixed_double"))
        need_ops = doubles or "nabla_single" in quad or "weight_single" in quad
        for M in cfg.steps:
            flow = ExternalFlow(g, cfg.hbar, V, cfg.T, M)
            row = {}
            if "commutator_x_W" in quad or "commutator_nabla_W" in quad:
                row.update(wave_commutator_residuals(flow, u))
            if need_ops:
                row.update(evolved_commutator_residuals(flow, gamma0, cfg.pairs if doubles else "none"))
            if "duhamel" in quad:
                row["duhamel"] = duhamel_residual(flow, u, M // 4)
            for k in quad:
                series[k].append(row[k])
        for k in quad:
            p = observed_order(series[k])
            results[k] = IdentityResult(k, "quadrature", series[k], p,
                                        bool(np.isfinite(p) and abs(p - 2.0) <= ORDER_SLACK))
    return IdentityReport(asdict(cfg), results)
