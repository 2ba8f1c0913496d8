from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from schartree.dense import dense_schatten, derivative_matrix, materialize_dense, operator_matrix
from schartree.grid import Field, make_grid
from schartree.operators import (
    LowRankOperator,
    NormLedger,
    apply_weights,
    commutator,
    density_array,
    frequency_weight,
    hermitian_eig,
    operator_norm,
    position_weight,
    random_operator,
    read_operator,
    recompress,
    schatten_norm,
    write_operator,
    x_sigma_norm,
)

REL = 1e-10


def dense_case(seed: int, d: int = 1, n: int = 16, L: float = 6.0):
    r = np.random.default_rng(seed)
    g = make_grid(d, n, L)
    hbar = float(r.uniform(0.1, 1.0))
    rank = int(r.integers(1, 6))
    A = random_operator(g, hbar, rank, r, hermitian=bool(r.integers(2)))
    return g, hbar, A


def dense_commutator(M, G):
    return G @ M - M @ G


def xsigma_oracle(A, sigma):
    """All thirteen ledger terms from dense matrices."""
    g, hbar = A.grid, A.hbar
    n, L, d = g.n, g.L, g.d
    sc = A.scale
    M = oracles.operator_matrix(A)
    D = [oracles.lift(oracles.derivative_1d(n, L), j, d) for j in range(d)]
    Xh = [oracles.position_diag(n, L, d, j) / hbar for j in range(d)]
    H, H2 = (oracles.frequency_weight(n, L, d, hbar, s) for s in (sigma, sigma / 2))
    X, X2 = (oracles.position_weight(n, L, d, s) for s in (sigma, sigma / 2))
    S = lambda B, r: oracles.schatten(B, r, sc)
    c = dense_commutator
    inf = np.inf
    out = {
        "S1": S(M, 1),
        "B_hgrad": S(H @ M @ H, inf),
        "B_x": S(X @ M @ X, inf),
        "S1_grad": sum(S(c(M, D[j]), 1) for j in range(d)),
        "S1_xh": sum(S(c(M, Xh[j]), 1) for j in range(d)),
        "S2_hgrad_grad": sum(S(H @ c(M, D[j]) @ H, 2) for j in range(d)),
        "S2_x_xh": sum(S(X @ c(M, Xh[j]) @ X, 2) for j in range(d)),
        "B_hgrad_grad": sum(S(H @ c(M, D[j]) @ H, inf) for j in range(d)),
        "B_x_xh": sum(S(X @ c(M, Xh[j]) @ X, inf) for j in range(d)),
        "S2_hgrad_grad_grad": sum(S(H2 @ c(c(M, D[k]), D[j]) @ H2, 2) for j in range(d) for k in range(d)),
        "S2_x_xh_xh": sum(S(X2 @ c(c(M, Xh[k]), Xh[j]) @ X2, 2) for j in range(d) for k in range(d)),
        "S2_hgrad_grad_xh": sum(S(H2 @ c(c(M, Xh[k]), D[j]) @ H2, 2) for j in range(d) for k in range(d)),
        "S2_x_grad_xh": sum(S(X2 @ c(c(M, Xh[k]), D[j]) @ X2, 2) for j in range(d) for k in range(d)),
    }
    return out


# -- algebra against dense matrices ---------------------------------------------

@pytest.mark.parametrize("r", [1.0, 2.0, 5.0, np.inf])
@pytest.mark.parametrize("seed", range(6))
def test_schatten_matches_svd(seed, r):
    g, hbar, A = dense_case(seed)
    expected = oracles.schatten(oracles.operator_matrix(A), r, A.scale)
    assert np.isclose(schatten_norm(A, r), expected, rtol=REL)


def test_schatten_rank_one_closed_form():
    g = make_grid(1, 64, 10.0)
    u = np.exp(-g.axis() ** 2)
    A = LowRankOperator.rank_one(Field(g, u), None, 0.5, 3.0)
    nu2 = g.cell * np.sum(u**2)
    for r in (1.0, 2.0, 3.0):
        assert np.isclose(schatten_norm(A, r), np.pi ** (1 / r) * 3.0 * nu2, rtol=1e-12)
    assert np.isclose(operator_norm(A), 3.0 * nu2, rtol=1e-12)


def test_schatten_rejects_small_exponent():
    g, _, A = dense_case(0)
    with pytest.raises(ValueError):
        schatten_norm(A, 0.5)


@pytest.mark.parametrize("kind", ["position", "frequency"])
@pytest.mark.parametrize("seed", range(4))
def test_weights_match_dense(seed, kind):
    g, hbar, A = dense_case(seed)
    s1, s2 = 1.3, -0.7
    if kind == "position":
        Wl, Wr = position_weight(s1), position_weight(s2)
        Ml, Mr = (oracles.position_weight(g.n, g.L, 1, s) for s in (s1, s2))
    else:
        Wl, Wr = frequency_weight(s1), frequency_weight(s2)
        Ml, Mr = (oracles.frequency_weight(g.n, g.L, 1, hbar, s) for s in (s1, s2))
    got = oracles.operator_matrix(apply_weights(A, Wl, Wr))
    expected = Ml @ oracles.operator_matrix(A) @ Mr
    assert oracles.rel(got, expected) < REL


@pytest.mark.parametrize("generator", ["position", "scaled_position", "gradient"])
@pytest.mark.parametrize("d", [1, 2])
def test_commutator_matches_dense(generator, d):
    g, hbar, A = dense_case(11 + d, d=d, n=16 if d == 1 else 8)
    for j in range(d):
        if generator == "gradient":
            G = oracles.lift(oracles.derivative_1d(g.n, g.L), j, d)
        else:
            G = oracles.position_diag(g.n, g.L, d, j)
            if generator == "scaled_position":
                G = G / hbar
        got = oracles.operator_matrix(commutator(A, generator, j))
        expected = dense_commutator(oracles.operator_matrix(A), G)
        assert oracles.rel(got, expected) < REL


def test_commutator_argument_checks():
    g, _, A = dense_case(1)
    with pytest.raises(ValueError):
        commutator(A, "momentum", 0)
    with pytest.raises(ValueError):
        commutator(A, "gradient", 1)


@pytest.mark.parametrize("d", [1, 2])
def test_x_sigma_norm_matches_dense(d):
    g, hbar, A = dense_case(3 + d, d=d, n=16 if d == 1 else 8)
    led = x_sigma_norm(A, 1.6)
    expected = xsigma_oracle(A, 1.6)
    assert set(led.entries) == set(expected)
    for k, v in expected.items():
        assert np.isclose(led[k], v, rtol=REL), k
    assert np.isclose(led.total, sum(expected.values()), rtol=REL)


def test_norm_ledger_json_round_trip():
    _, _, A = dense_case(2)
    led = x_sigma_norm(A)
    back = NormLedger.from_json(led.to_json())
    assert back.entries == led.entries and back.params == led.params
    assert np.isclose(back.total, led.total)


# -- package dense helpers agree with the independent oracles ---------------------

def test_dense_helpers_agree():
    g, hbar, A = dense_case(7)
    assert oracles.rel(operator_matrix(A), oracles.operator_matrix(A)) < 1e-14
    assert oracles.rel(derivative_matrix(g, 0), oracles.derivative_1d(g.n, g.L)) < 1e-12
    K = materialize_dense(A)
    assert np.isclose(dense_schatten(g.cell * K, 2.0, A.scale), schatten_norm(A, 2.0), rtol=REL)


def test_dense_guard():
    g = make_grid(1, 8192, 10.0)
    A = LowRankOperator.zero(g, 0.5)
    with pytest.raises(ValueError):
        materialize_dense(A)


# -- structural identities -------------------------------------------------------

@given(st.integers(0, 2**31 - 1))
def test_sum_product_trace_adjoint(seed):
    r = np.random.default_rng(seed)
    g = make_grid(1, 16, 5.0)
    A = random_operator(g, 0.5, int(r.integers(1, 4)), r)
    B = random_operator(g, 0.5, int(r.integers(1, 4)), r)
    MA, MB = oracles.operator_matrix(A), oracles.operator_matrix(B)
    assert oracles.rel(oracles.operator_matrix(A + B), MA + MB) < 1e-12
    assert oracles.rel(oracles.operator_matrix(A - B), MA - MB) < 1e-12
    assert oracles.rel(oracles.operator_matrix(A @ B), MA @ MB) < 1e-12
    assert oracles.rel(oracles.operator_matrix(A.adjoint()), MA.conj().T) < 1e-12
    assert np.isclose(A.trace(), np.trace(MA), rtol=1e-12, atol=1e-14)
    v = r.standard_normal(16) + 1j * r.standard_normal(16)
    assert oracles.rel(A.apply(v), MA @ v) < 1e-12


def test_operators_on_different_grids_do_not_mix():
    A = LowRankOperator.zero(make_grid(1, 16, 5.0), 0.5)
    B = LowRankOperator.zero(make_grid(1, 16, 6.0), 0.5)
    with pytest.raises(ValueError):
        A + B


def test_density_is_scaled_diagonal():
    g = make_grid(1, 64, 12.0)
    x = g.axis()
    u = np.exp(-x**2 / 2) / np.pi**0.25
    hbar = 0.25
    A = LowRankOperator.rank_one(Field(g, u), None, hbar, 1 / (2 * np.pi * hbar))
    rho = density_array(A)
    assert np.allclose(rho, u**2, atol=1e-15)
    assert np.isclose(np.sum(rho.real) * g.cell, (A.scale * A.trace()).real)


@pytest.mark.parametrize("hermitian", [True, False])
def test_recompress_preserves_operator(hermitian, rng):
    g = make_grid(1, 32, 6.0)
    A = random_operator(g, 0.5, 3, rng, hermitian=hermitian)
    doubled = A + A
    B = recompress(doubled)
    assert B.rank_bound <= 3
    assert oracles.rel(oracles.operator_matrix(B), 2 * oracles.operator_matrix(A)) < 1e-12


def test_recompress_tolerance_drops_small_modes():
    g = make_grid(1, 32, 6.0)
    x = g.axis()
    u = np.exp(-x**2) / np.sqrt(g.cell * np.sum(np.exp(-2 * x**2)))
    v = np.exp(-(x - 1) ** 2) * x
    v = v - u * g.cell * np.sum(u * v)
    v /= np.sqrt(g.cell * np.sum(np.abs(v) ** 2))
    A = LowRankOperator.from_orbitals(g, 0.5, np.stack([u, v]), [1.0, 1e-6])
    assert recompress(A, tol=1e-3).rank_bound == 1
    assert recompress(A).rank_bound == 2


def test_hermitian_eig_reconstructs():
    g = make_grid(1, 32, 6.0)
    r = np.random.default_rng(5)
    A = random_operator(g, 0.5, 3, r, hermitian=True)
    orbs, occ = hermitian_eig(A)
    B = LowRankOperator.from_orbitals(g, 0.5, orbs, occ)
    assert oracles.rel(oracles.operator_matrix(B), oracles.operator_matrix(A)) < 1e-12
    gram = g.cell * orbs.reshape(len(occ), -1).conj() @ orbs.reshape(len(occ), -1).T
    assert np.allclose(gram, np.eye(len(occ)), atol=1e-12)


def test_hermitian_eig_requires_flag(rng):
    g = make_grid(1, 16, 4.0)
    with pytest.raises(ValueError):
        hermitian_eig(random_operator(g, 0.5, 2, rng, hermitian=False))


@pytest.mark.parametrize("d", [1, 2])
def test_operator_round_trip(d, rng):
    g = make_grid(d, 8, 4.0)
    A = random_operator(g, 0.3, 2, rng)
    buf = io.BytesIO()
    write_operator(buf, A)
    buf.seek(0)
    B = read_operator(buf)
    assert B.grid == g and B.hbar == 0.3 and B.hermitian == A.hermitian
    assert np.array_equal(B.coef, A.coef) and np.array_equal(B.left, A.left)


def test_hbar_range_enforced():
    g = make_grid(1, 16, 4.0)
    with pytest.raises(ValueError):
        LowRankOperator.zero(g, 1.5)
