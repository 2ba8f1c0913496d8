from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from schartree.grid import FREQUENCY, Field, make_grid
from schartree.operators import LowRankOperator, density_array, hermitian_eig, schatten_norm
from schartree.propagators import (
    BoundaryContamination,
    PotentialSpec,
    StrangStepper,
    accumulate_phase,
    energy,
    evolve_external,
    free_propagate,
    hartree_evolve,
    load_trajectory,
    modified_profile,
    read_ledger_csv,
    save_trajectory,
    step_schedule,
    wave_operator_apply,
    write_ledger_csv,
)


def l2(g, v):
    return float(np.sqrt(g.cell * np.sum(np.abs(v) ** 2)))


def gaussian_state(g, hbar, width=1.0, momentum=0.0):
    x = g.axis()
    u = np.exp(-x**2 / (2 * width**2) + 1j * momentum * x / hbar)
    u /= np.sqrt(g.cell * np.sum(np.abs(u) ** 2))
    return LowRankOperator.rank_one(Field(g, u), None, hbar, (2 * np.pi * hbar) ** (-1))


# -- free flow ---------------------------------------------------------------------

@pytest.mark.parametrize("hbar,t", [(1.0, 1.0), (0.5, 3.0), (0.25, -2.0)])
def test_free_gaussian_closed_form(hbar, t):
    g = make_grid(1, 4096, 80.0)
    x = g.axis()
    u = free_propagate(Field(g, np.exp(-x**2 / 2)), t, hbar)
    z = 1 + 1j * hbar * t
    expected = z**-0.5 * np.exp(-x**2 / (2 * z))
    assert np.abs(u.values - expected).max() < 1e-9


@given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([1.0, 0.5, 0.125]))
def test_free_group_law_and_unitarity(t, s, hbar):
    g = make_grid(1, 256, 40.0)
    x = g.axis()
    u = Field(g, np.exp(-(x - 1) ** 2 + 2j * x))
    a = free_propagate(free_propagate(u, s, hbar), t, hbar)
    b = free_propagate(u, t + s, hbar)
    assert l2(g, a.values - b.values) < 1e-12
    assert abs(a.l2() - u.l2()) < 1e-12


def test_free_time_zero_is_identity():
    g = make_grid(2, 16, 6.0)
    u = Field(g, np.random.default_rng(1).standard_normal(g.shape))
    assert np.array_equal(free_propagate(u, 0.0, 0.5).values, u.values)


# -- external potentials ----------------------------------------------------------

def test_step_schedule_shortens_last_step():
    sched = step_schedule(0.0, 1.0, 0.3)
    assert len(sched) == 4
    assert np.isclose(sum(h for _, h in sched), 1.0)
    assert np.isclose(sched[-1][1], 0.1)
    assert step_schedule(0.0, 0.0, 0.1) == []
    with pytest.raises(ValueError):
        step_schedule(0.0, 1.0, 0.0)


def test_stepper_unitary_and_invertible(rng):
    g = make_grid(1, 128, 20.0)
    st_ = StrangStepper(g, 0.5)
    u = rng.standard_normal(128) + 1j * rng.standard_normal(128)
    V = rng.standard_normal(128)
    w = st_.step(u, V, 0.1)
    assert abs(l2(g, w) - l2(g, u)) < 1e-10 * l2(g, u)
    assert l2(g, st_.unstep(w, V, 0.1) - u) < 1e-12 * l2(g, u)


def test_zero_potential_matches_free():
    g = make_grid(1, 512, 40.0)
    x = g.axis()
    u = Field(g, np.exp(-x**2 / 2))
    a = evolve_external(u, 0.0, 0.0, 2.0, 0.1, 0.7)
    b = free_propagate(u, 2.0, 0.7)
    assert l2(g, a.values - b.values) < 1e-12


def test_constant_potential_is_global_phase():
    g = make_grid(1, 512, 40.0)
    x = g.axis()
    u = Field(g, np.exp(-x**2 / 2))
    c, hbar, T = 0.8, 0.5, 2.0
    a = evolve_external(u, c, 0.0, T, 0.07, hbar)
    b = np.exp(-1j * c * T / hbar) * free_propagate(u, T, hbar).values
    assert l2(g, a.values - b) < 1e-10


def test_strang_second_order():
    g = make_grid(1, 512, 40.0)
    x = g.axis()
    V = np.minimum(x**2 / 2, 50.0)
    u = Field(g, np.exp(-(x - 1) ** 2 / 2))
    T, dt = 1.0, 0.1
    ref = evolve_external(u, V, 0.0, T, dt / 8, 1.0).values
    e1 = l2(g, evolve_external(u, V, 0.0, T, dt, 1.0).values - ref)
    e2 = l2(g, evolve_external(u, V, 0.0, T, dt / 2, 1.0).values - ref)
    assert 3.5 <= e1 / e2 <= 4.5
    ref16 = evolve_external(u, V, 0.0, T, dt / 16, 1.0).values
    f1 = l2(g, evolve_external(u, V, 0.0, T, dt, 1.0).values - ref16)
    f2 = l2(g, evolve_external(u, V, 0.0, T, dt / 2, 1.0).values - ref16)
    assert abs(np.log2(f1 / f2) - 2.0) <= 0.2


def test_external_strict_contamination():
    g = make_grid(1, 128, 10.0)
    x = g.axis()
    u = Field(g, np.exp(-x**2 / 2 + 4j * x))
    with pytest.raises(BoundaryContamination):
        evolve_external(u, 0.0, 0.0, 3.0, 0.1, 1.0, strict=True)
    with pytest.warns(RuntimeWarning):
        evolve_external(u, 0.0, 0.0, 3.0, 0.1, 1.0)


# -- phase accumulation -----------------------------------------------------------

def test_phase_for_spatially_constant_potential():
    g = make_grid(1, 64, 20.0)
    hbar, T, dt = 0.5, 2.0, 0.05
    psi = Field(g, np.zeros(64), FREQUENCY)
    for a, h in step_schedule(0.0, T, dt):
        tau = a + h / 2
        psi = accumulate_phase(psi, Field(g, np.full(64, np.exp(-tau))), a, h, hbar)
    exact = (1 - np.exp(-T)) / hbar
    err = np.abs(psi.values.real - exact).max()
    assert err < 1e-3
    assert np.allclose(psi.values.imag, 0.0)


def _cos_phase_error(dt, T=3.0):
    g = make_grid(1, 64, 20.0)
    x = g.axis()
    V = Field(g, np.cos(2 * np.pi * x / g.L))
    psi = Field(g, np.zeros(64), FREQUENCY)
    for a, h in step_schedule(0.0, T, dt):
        psi = accumulate_phase(psi, V, a, h, 1.0)
    xi = g.frequency_axis()
    k = 2 * np.pi * xi / g.L
    exact = np.where(k == 0, T, np.sin(k * T) / np.where(k == 0, 1.0, k))
    inside = T * np.abs(xi) <= g.L / 2  # beyond this the far-field rule takes over
    return np.abs(psi.values.real - exact)[inside].max()


def test_phase_midpoint_rule_order_two():
    e = [_cos_phase_error(dt) for dt in (0.1, 0.05, 0.025)]
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert np.all(np.abs(orders - 2.0) < 0.2)


def test_phase_zero_potential_unchanged():
    g = make_grid(1, 32, 10.0)
    psi = Field(g, np.linspace(0, 1, 32), FREQUENCY)
    out = accumulate_phase(psi, Field(g, np.zeros(32)), 0.3, 0.1, 0.5)
    assert np.array_equal(out.values, psi.values)


def test_phase_rule_validation():
    g = make_grid(1, 32, 10.0)
    with pytest.raises(ValueError):
        accumulate_phase(Field(g, np.zeros(32), FREQUENCY), Field(g, np.zeros(32)), 0, 0.1, 1.0, rule="trapezoid")


# -- potentials -------------------------------------------------------------------

def test_potential_spec_validation():
    with pytest.raises(ValueError):
        PotentialSpec("yukawa", 1.0)
    with pytest.raises(ValueError):
        PotentialSpec("custom", 1.0)
    with pytest.raises(ValueError):
        PotentialSpec.gaussian(0.1, width=0.0)
    g = make_grid(1, 32, 10.0)
    w = PotentialSpec.regularized_coulomb(0.3)
    assert np.isclose(w.kernel(g)[16], 0.3)
    assert PotentialSpec.gaussian(0.0).is_zero
    ff = w.far_field(2.0)
    assert np.isclose(ff(np.array([[20.0]]))[0], 0.3 * 2.0 / 20.0)
    assert PotentialSpec.from_dict(w.to_dict()) == w


# -- Hartree ----------------------------------------------------------------------

def test_hartree_zero_coupling_equals_free():
    g = make_grid(1, 512, 60.0)
    A = gaussian_state(g, 0.5, momentum=0.2)
    traj = hartree_evolve(A, PotentialSpec.gaussian(0.0), 4.0, 0.1, stride=10)
    u0 = A.left[0]
    for t, snap in zip(traj.times, traj.snapshots):
        ut = free_propagate(Field(g, u0), t, 0.5).values
        ref = LowRankOperator.rank_one(Field(g, ut), None, 0.5, A.coef[0, 0].real)
        assert schatten_norm(snap - ref, 2) < 1e-8
    assert all(np.all(p == 0) for p in traj.phases)


def test_hartree_conservation_example():
    g = make_grid(1, 1024, 160.0)
    A = gaussian_state(g, 1.0)
    traj = hartree_evolve(A, PotentialSpec.gaussian(0.05, 1.0), 10.0, 1 / 64, stride=64)
    led = traj.ledger
    mass = [r["mass"] for r in led]
    en = [r["energy"] for r in led]
    assert max(abs(m - mass[0]) for m in mass) < 1e-9
    assert max(abs(e - en[0]) for e in en) < 1e-6
    assert not traj.flags["boundary_contaminated"]
    assert np.isclose(en[0], energy(A, PotentialSpec.gaussian(0.05, 1.0)), rtol=1e-12)


def _rank4_toeplitz(g, hbar):
    from schartree.phase_space import gaussian_seed, toeplitz_quantize

    f0 = gaussian_seed(g, make_grid(1, 128, 16.0), 0.5, 0.5)
    orbs, occ = hermitian_eig(toeplitz_quantize(f0, hbar))
    return LowRankOperator.from_orbitals(g, hbar, orbs[:4], occ[:4])


def test_hartree_self_convergence_order_two():
    g = make_grid(1, 2048, 192.0)
    A = _rank4_toeplitz(g, 0.5)
    w = PotentialSpec.regularized_coulomb(0.02)
    finals = [hartree_evolve(A, w, 20.0, dt, stride=10**6).snapshots[-1] for dt in (0.2, 0.1, 0.05)]
    d1 = schatten_norm(finals[0] - finals[1], 2)
    d2 = schatten_norm(finals[1] - finals[2], 2)
    assert abs(np.log2(d1 / d2) - 2.0) <= 0.3


def test_hartree_conservation_toeplitz():
    g = make_grid(1, 1024, 96.0)
    A = _rank4_toeplitz(g, 0.5)
    drifts = []
    for dt in (0.05, 0.025):
        traj = hartree_evolve(A, PotentialSpec.regularized_coulomb(-0.02), 10.0, dt, stride=int(round(2.5 / dt)))
        m = np.array([r["mass"] for r in traj.ledger])
        e = np.array([r["energy"] for r in traj.ledger])
        assert np.abs(m / m[0] - 1).max() < 1e-8
        drifts.append(np.abs(e / e[0] - 1).max())
    # the energy error is the splitting error, so it falls as dt^2
    assert abs(np.log2(drifts[0] / drifts[1]) - 2.0) < 0.3
    assert drifts[1] < 1e-6


def test_gauge_covariance():
    g = make_grid(1, 512, 60.0)
    A = gaussian_state(g, 0.5, momentum=0.3)
    w = PotentialSpec.gaussian(0.05, 1.0)
    shifted = PotentialSpec.custom(Field(g, w.kernel(g) + 0.7))
    a = hartree_evolve(A, w, 3.0, 0.05, stride=20)
    b = hartree_evolve(A, shifted, 3.0, 0.05, stride=20)
    for sa, sb in zip(a.snapshots, b.snapshots):
        assert np.abs(density_array(sa) - density_array(sb)).max() < 1e-10


def test_hartree_resume_matches_uninterrupted():
    g = make_grid(1, 512, 60.0)
    A = gaussian_state(g, 0.5)
    w = PotentialSpec.regularized_coulomb(0.05)
    full = hartree_evolve(A, w, 4.0, 0.05, stride=20)
    part = hartree_evolve(A, w, 2.0, 0.05, stride=20)
    done = hartree_evolve(A, w, 4.0, 0.05, stride=20, resume=part)
    assert done.times == full.times
    assert schatten_norm(done.snapshots[-1] - full.snapshots[-1], 2) < 1e-12
    assert np.abs(done.phases[-1] - full.phases[-1]).max() < 1e-12


def test_hartree_is_deterministic():
    g = make_grid(1, 256, 40.0)
    A = gaussian_state(g, 0.5)
    w = PotentialSpec.regularized_coulomb(0.05)
    a = hartree_evolve(A, w, 1.0, 0.1, stride=5)
    b = hartree_evolve(A, w, 1.0, 0.1, stride=5)
    assert all(np.array_equal(x.left, y.left) for x, y in zip(a.snapshots, b.snapshots))
    assert a.ledger == b.ledger


def test_hartree_rejects_contaminated_or_nonhermitian_data():
    g = make_grid(1, 64, 10.0)
    x = g.axis()
    edge = np.exp(-((x - 4.5) ** 2))
    with pytest.raises(BoundaryContamination):
        hartree_evolve(LowRankOperator.rank_one(Field(g, edge), None, 0.5), PotentialSpec.gaussian(0.0), 1.0, 0.1)
    u = Field(g, np.exp(-x**2))
    A = LowRankOperator.rank_one(u, Field(g, np.exp(-x**2) * 1j), 0.5)
    with pytest.raises(ValueError):
        hartree_evolve(A, PotentialSpec.gaussian(0.0), 1.0, 0.1)


def test_hartree_flags_contamination_and_stops():
    g = make_grid(1, 256, 20.0)
    A = gaussian_state(g, 1.0, momentum=3.0)
    traj = hartree_evolve(A, PotentialSpec.regularized_coulomb(0.02), 10.0, 0.05, stride=1000)
    assert traj.flags["boundary_contaminated"]
    assert traj.times[-1] < 10.0
    assert traj.flags["aborted_at"] == pytest.approx(traj.times[-1])


# -- wave operators and profiles -----------------------------------------------------

@pytest.fixture(scope="module")
def interacting():
    g = make_grid(1, 512, 60.0)
    A = gaussian_state(g, 0.5)
    return hartree_evolve(A, PotentialSpec.regularized_coulomb(0.1), 4.0, 0.05, stride=20)


def test_wave_operator_identity_and_unitarity(interacting):
    g = interacting.grid
    x = g.axis()
    u = Field(g, np.exp(-(x - 2) ** 2) * (1 + 0.5j * x))
    assert np.array_equal(wave_operator_apply(u, interacting, 0.0).values, u.values)
    for t in interacting.times[1:]:
        Wu = wave_operator_apply(u, interacting, t)
        assert abs(Wu.l2() - u.l2()) < 1e-10
        back = interacting.wave(Wu.values, t, adjoint=True)
        assert l2(g, back - u.values) < 1e-10
    with pytest.raises(ValueError):
        wave_operator_apply(u, interacting, 1.234)


def test_wave_operator_free_is_identity():
    g = make_grid(1, 256, 40.0)
    traj = hartree_evolve(gaussian_state(g, 0.5), PotentialSpec.gaussian(0.0), 2.0, 0.1, stride=10)
    u = np.exp(-g.axis() ** 2).astype(complex)
    assert l2(g, traj.wave(u, 2.0) - u) < 1e-12


def test_profile_preserves_norms(interacting):
    for t in interacting.times:
        P = modified_profile(interacting, t)
        G = interacting.snapshot(t)
        assert P.hermitian
        for r in (1.0, 2.0, np.inf):
            assert abs(schatten_norm(P, r) - schatten_norm(G, r)) < 1e-10
    P0 = modified_profile(interacting, 0.0)
    assert schatten_norm(P0 - interacting.snapshots[0], 2) < 1e-14


def test_free_profile_is_initial_state():
    g = make_grid(1, 256, 40.0)
    A = gaussian_state(g, 0.5, momentum=0.1)
    traj = hartree_evolve(A, PotentialSpec.gaussian(0.0), 3.0, 0.1, stride=10)
    for t in traj.times:
        assert schatten_norm(modified_profile(traj, t) - A, 2) < 1e-8


# -- persistence --------------------------------------------------------------------

def test_trajectory_round_trip(tmp_path, interacting):
    save_trajectory(interacting, tmp_path / "run", "[grid]\n")
    back = load_trajectory(tmp_path / "run")
    assert back.times == interacting.times and back.steps == interacting.steps
    assert back.potential == interacting.potential
    for a, b in zip(back.snapshots, interacting.snapshots):
        assert np.array_equal(a.left, b.left)
    u = np.exp(-interacting.grid.axis() ** 2).astype(complex)
    assert np.array_equal(back.wave(u, 4.0), interacting.wave(u, 4.0))
    assert [r["mass"] for r in back.ledger] == [r["mass"] for r in interacting.ledger]


def test_custom_kernel_round_trip(tmp_path):
    g = make_grid(1, 128, 30.0)
    w = PotentialSpec.custom(Field(g, 0.02 * np.exp(-g.axis() ** 2)))
    traj = hartree_evolve(gaussian_state(g, 0.5), w, 0.5, 0.1, stride=5)
    assert traj.flags["far_field_custom"]
    save_trajectory(traj, tmp_path / "c")
    back = load_trajectory(tmp_path / "c")
    assert np.array_equal(back.potential.kernel(g), w.kernel(g))


def test_ledger_csv_round_trip(tmp_path):
    rows = [{"t": 0.0, "mass": 1.0, "energy": 0.1 + 0.2}, {"t": 0.5, "mass": 1.0 - 1e-17, "energy": np.float64(1 / 3)}]
    write_ledger_csv(tmp_path / "l.csv", rows)
    back = read_ledger_csv(tmp_path / "l.csv")
    assert back == [{k: float(v) for k, v in r.items()} for r in rows]
