"""Short-horizon checks in three dimensions on a 32^3 lattice.

Free decay of a rank-one Gaussian against its closed form, conservation in a
regularized-Coulomb Hartree run, and optionally the identity suite.

    python scripts/d3_spot_check.py --identities
"""
from __future__ import annotations

import argparse
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from schartree import harness as hs
from schartree.grid import Field, make_grid
from schartree.identities import IdentityConfig, identity_suite, wavepacket
from schartree.operators import LowRankOperator
from schartree.propagators import PotentialSpec, hartree_evolve


@dataclass
class Settings:
    n: int = 32
    L: float = 20.0
    hbar: float = 1.0
    width: float = 1.0
    kappa: float = 0.02
    dt: float = 0.02
    T: float = 2.0


def run(s: Settings, identities: bool) -> dict:
    g = make_grid(3, s.n, s.L)
    u = wavepacket(g, [0.0] * 3, [0.0] * 3, s.width)
    A = LowRankOperator.rank_one(Field(g, u), None, s.hbar, (2 * np.pi * s.hbar) ** -3)
    times = list(np.linspace(0.0, s.T, 5))
    tr = hs.free_trajectory(A, times)
    r0 = tr.ledger[0]["rho_sup"]
    # sup density of a width-w Gaussian decays like (1 + (hbar t / w^2)^2)^{-3/2}
    decay = [row["rho_sup"] / r0 * (1 + (s.hbar * t / s.width**2) ** 2) ** 1.5 - 1
             for t, row in zip(tr.times, tr.ledger)]
    run_ = hartree_evolve(A, PotentialSpec.regularized_coulomb(s.kappa), s.T, s.dt,
                          stride=max(1, int(round(s.T / s.dt / 4))))
    led = run_.ledger
    out = {
        "settings": asdict(s),
        "free_decay_rel_error": [float(x) for x in decay],
        "mass_drift": max(abs(r["mass"] / led[0]["mass"] - 1) for r in led),
        "energy_drift": max(abs(r["energy"] / led[0]["energy"] - 1) for r in led),
        "boundary_contaminated": bool(run_.flags.get("boundary_contaminated")),
    }
    if identities:
        cfg = IdentityConfig(d=3, n=s.n, L=s.L, hbar=s.hbar, packet_width=1.25, momentum=0.0, rank=1,
                             t_mdfm=2.0, t_j=0.25, t_density=2.0)
        out["identities"] = json.loads(identity_suite(cfg).to_json())
    return out


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/d3")
    p.add_argument("--identities", action="store_true", help="also run the identity suite (a few minutes)")
    args = p.parse_args(argv)
    res = run(Settings(), args.identities)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "d3.json").write_text(json.dumps(res, indent=2) + "\n")
    print("free decay rel error", " ".join(f"{x:.1e}" for x in res["free_decay_rel_error"]))
    print(f"mass drift {res['mass_drift']:.1e}, energy drift {res['energy_drift']:.1e}")
    if "identities" in res:
        for name, r in res["identities"]["results"].items():
            print(f"{name:<22} {'pass' if r['passing'] else 'FAIL'} " + " ".join(f"{x:.1e}" for x in r["residuals"]))


if __name__ == "__main__":
    main()
