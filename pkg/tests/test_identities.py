from __future__ import annotations

import json

import numpy as np
import pytest

from schartree.grid import make_grid
from schartree.identities import (
    ALL_IDENTITIES,
    QUADRATURE,
    SPECTRAL,
    ExternalFlow,
    IdentityConfig,
    SmoothPotential,
    density_derivative_residual,
    identity_suite,
    j_residual,
    mdfm_residual,
    observed_order,
    smooth_state,
    wavepacket,
)


@pytest.fixture(scope="module")
def report():
    return identity_suite(IdentityConfig())


def test_suite_covers_every_identity(report):
    assert set(report.results) == set(ALL_IDENTITIES)
    assert report.passing


@pytest.mark.parametrize("name", SPECTRAL)
def test_spectral_identities_flat(report, name):
    r = report.results[name]
    assert r.kind == "spectral"
    assert all(x <= 1e-8 for x in r.residuals)
    assert len(r.residuals) == 2


@pytest.mark.parametrize("name", QUADRATURE)
def test_quadrature_identities_second_order(report, name):
    r = report.results[name]
    assert abs(r.order - 2.0) <= 0.3
    assert all(a > b for a, b in zip(r.residuals, r.residuals[1:]))


def test_report_serializes(report):
    raw = json.loads(report.to_json())
    assert raw["passing"] is True
    assert raw["config"]["n"] == 256


def test_density_derivative_invariant():
    g = make_grid(1, 256, 40.0)
    gam = smooth_state(g, 0.5, rank=2)
    assert density_derivative_residual(gam, 1.0) < 1e-7


def test_mdfm_example():
    g = make_grid(1, 512, 40.0)
    u = wavepacket(g, [0.3], [0.5], 1.0)
    assert mdfm_residual(g, 0.5, 2.0, u) < 1e-8
    assert j_residual(g, 0.5, 2.0, u) < 1e-8


def test_pairs_none_skips_double_commutators():
    rep = identity_suite(IdentityConfig(pairs="none"), suites=QUADRATURE)
    assert not any(k.endswith("_double") for k in rep.results)


def test_unknown_identity_rejected():
    with pytest.raises(ValueError):
        identity_suite(IdentityConfig(), suites=("mdfm", "virial"))


def test_observed_order():
    assert observed_order([4.0, 1.0, 0.25]) == pytest.approx(2.0)
    assert np.isnan(observed_order([1.0]))
    assert np.isnan(observed_order([1.0, 0.0]))


def test_external_flow_round_trip():
    g = make_grid(1, 128, 30.0)
    flow = ExternalFlow(g, 0.5, SmoothPotential(0.5, 2.0), 1.0, 16)
    u = wavepacket(g, [0.0], [0.2])
    back = flow.wave(u)
    assert abs(np.sqrt(g.cell * np.sum(np.abs(back) ** 2)) - 1.0) < 1e-12
