"""Distance between the Wigner transform of the quantum state and classical transport.

Free leg: exact free Schroedinger flow against free transport at time ``t``.
Interacting leg: Hartree against Vlasov with the same Gaussian interaction.

    python scripts/semiclassical.py --hbars 0.5 0.25 0.125
"""
from __future__ import annotations

import argparse
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from schartree import phase_space as ps
from schartree.grid import Grid, make_grid
from schartree.propagators import PotentialSpec, free_array, hartree_evolve


@dataclass
class Settings:
    hbars: list = field(default_factory=lambda: [0.5, 0.25, 0.125])
    sq: float = 1.0
    sp: float = 0.5
    t_free: float = 2.0
    n_free: int = 512
    L_free: float = 32.0
    kappa: float = 0.05
    T: float = 5.0
    dt: float = 0.02
    n: int = 512
    L: float = 48.0


def distances(d) -> dict:
    return {"weak": d.weak, "l2": d.l2, "combined": d.combined}


def run(s: Settings) -> dict:
    pg = Grid(1, 256, 16.0)
    g = make_grid(1, s.n_free, s.L_free)
    f0 = ps.gaussian_seed(g, pg, s.sq, s.sp)
    fv = ps.vlasov_free(f0, s.t_free)
    out = {"settings": asdict(s), "free": {}, "interacting": {}}
    for hbar in s.hbars:
        A = ps.toeplitz_quantize(f0, hbar)
        At = A.map_factors(lambda F, h=hbar: free_array(F, g, s.t_free, h), hermitian=True)
        out["free"][hbar] = distances(ps.wigner_vlasov_distance(At, fv))
    g2 = make_grid(1, s.n, s.L)
    f2 = ps.gaussian_seed(g2, pg, s.sq, s.sp)
    w = PotentialSpec.gaussian(s.kappa, 1.0)
    fT = ps.vlasov_evolve(f2, w, s.T, s.dt).at(s.T)
    for hbar in s.hbars:
        tr = hartree_evolve(ps.toeplitz_quantize(f2, hbar), w, s.T, s.dt, stride=int(round(s.T / s.dt)))
        out["interacting"][hbar] = distances(ps.wigner_vlasov_distance(tr.snapshot(s.T), fT))
    return out


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/semiclassical")
    p.add_argument("--hbars", type=float, nargs="+", default=None)
    args = p.parse_args(argv)
    s = Settings()
    if args.hbars:
        s.hbars = args.hbars
    res = run(s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "semiclassical.json").write_text(json.dumps(res, indent=2) + "\n")
    for leg in ("free", "interacting"):
        for hbar, d in res[leg].items():
            print(f"{leg:<12} hbar={hbar:<6g} weak={d['weak']:.3e} l2={d['l2']:.3e} combined={d['combined']:.3e}")


if __name__ == "__main__":
    main()
