"""Semiclassical Hartree dynamics with low-rank density operators.

Grids and Fourier conventions live in :mod:`schartree.grid`, the operator
algebra in :mod:`schartree.operators`, time stepping in
:mod:`schartree.propagators`, Wigner/Toeplitz/Vlasov tools in
:mod:`schartree.phase_space`, and the measurement harness in
:mod:`schartree.harness` and :mod:`schartree.identities`.
"""
from __future__ import annotations

from .grid import Field, Grid, fourier_transform, make_grid
from .harness import (
    DecayFit,
    SweepReport,
    decay_fit,
    dispersive_constant,
    hbar_sweep,
    norm_ledger_series,
    scattering_residual,
    wave_operator_boundedness,
)
from .identities import IdentityConfig, identity_suite
from .operators import LowRankOperator, commutator, density, schatten_norm, x_sigma_norm
from .phase_space import (
    ClassicalDistribution,
    toeplitz_quantize,
    vlasov_evolve,
    vlasov_free,
    wigner,
    wigner_vlasov_distance,
)
from .propagators import PotentialSpec, Trajectory, hartree_evolve

__version__ = "0.1.0"

__all__ = [
    "ClassicalDistribution", "DecayFit", "Field", "Grid", "IdentityConfig", "LowRankOperator",
    "PotentialSpec", "SweepReport", "Trajectory", "commutator", "decay_fit", "density",
    "dispersive_constant", "fourier_transform", "hartree_evolve", "hbar_sweep", "identity_suite",
    "make_grid", "norm_ledger_series", "scattering_residual", "schatten_norm", "toeplitz_quantize",
    "vlasov_evolve", "vlasov_free", "wave_operator_boundedness", "wigner", "wigner_vlasov_distance",
    "x_sigma_norm",
]
