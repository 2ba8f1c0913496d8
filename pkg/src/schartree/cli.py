"""Command-line runner: ``schartree <command> --config run.toml [--out DIR] ...``.

Exit codes: 0 success, 1 a check or verdict failed, 2 invalid config or
inputs, 3 boundary contamination, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .grid import THREADS_ENV, Field, make_grid
from .operators import LowRankOperator, hermitian_eig, read_operator, write_operator, x_sigma_norm

log = logging.getLogger("schartree")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CONTAMINATED, EXIT_DIVERGED = 0, 1, 2, 3, 4
COMMANDS = ("run-hartree", "run-vlasov", "sweep-hbar", "check-identities", "fit-decay",
            "quantize", "dispersive")


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- initial data ---------------------------------------------------------------

def classical_seed(cfg: ExperimentConfig):
    from .phase_space import gaussian_seed

    da = cfg.data
    pgrid = make_grid(cfg.grid.d, da.p_n, da.p_L)
    return gaussian_seed(cfg.make_grid(), pgrid, da.sq, da.sp, da.mass, da.q0, da.p0)


def rank_one_state(cfg: ExperimentConfig, hbar: float) -> np.ndarray:
    """Normalized packet scaled so that its density has mass ``data.mass``."""
    da = cfg.data
    g = cfg.make_grid()
    x = g.coords()
    r2 = sum((c - da.q0) ** 2 for c in x)
    u = np.exp(-r2 / (2 * da.width**2)) * np.exp(1j * da.p0 * sum(x) / hbar)
    u = np.broadcast_to(u, g.shape)
    return u * np.sqrt(da.mass / (np.sum(np.abs(u) ** 2) * g.cell))


def initial_state(cfg: ExperimentConfig, hbar: float) -> LowRankOperator:
    from .phase_space import toeplitz_quantize

    da = cfg.data
    g = cfg.make_grid()
    if da.seed == "toeplitz":
        strides = (da.stride_q, da.stride_p) if da.stride_q and da.stride_p else None
        return toeplitz_quantize(classical_seed(cfg), hbar, strides, da.tol,
                                 literal_coherent=cfg.physics.literal_coherent)
    if da.seed == "rank-one":
        u = rank_one_state(cfg, hbar)
        return LowRankOperator.rank_one(Field(g, u), None, hbar, (2 * np.pi * hbar) ** (-g.d))
    with open(da.path, "rb") as fp:
        A = read_operator(fp)
    if A.grid != g:
        raise CommandError("operator file lives on a different grid than [grid]", EXIT_CONFIG)
    if abs(A.hbar - hbar) > 1e-15:
        raise CommandError("operator file was built for a different hbar", EXIT_CONFIG)
    return A


# -- output helpers ----------------------------------------------------------------

def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _trajectory_exit(flags: dict) -> int:
    if flags.get("diverged"):
        return EXIT_DIVERGED
    if flags.get("boundary_contaminated"):
        return EXIT_CONTAMINATED
    return EXIT_OK


# -- commands ----------------------------------------------------------------------

def cmd_run_hartree(cfg: ExperimentConfig, out: Path, args) -> int:
    from .harness import norm_ledger_series
    from .propagators import BoundaryContamination, hartree_evolve, load_trajectory, save_trajectory, write_ledger_csv

    hbar = cfg.physics.hbar
    w = cfg.potential_spec()
    ti = cfg.time
    resume = None
    if args.resume and (out / "manifest.json").exists():
        resume = load_trajectory(out)
        if resume.grid != cfg.make_grid() or resume.hbar != hbar or resume.dt != ti.dt:
            raise CommandError("stored run does not match the config; refusing to resume", EXIT_CONFIG)
        log.info("resuming from t=%g", resume.horizon)
        gamma0 = resume.snapshots[0]
    else:
        gamma0 = initial_state(cfg, hbar)
    try:
        traj = hartree_evolve(gamma0, w, ti.T, ti.dt, stride=ti.stride, phase_rule=ti.phase_rule,
                              resume=resume)
    except BoundaryContamination as exc:
        raise CommandError(str(exc), EXIT_CONTAMINATED) from exc
    save_trajectory(traj, out, cfg.to_text())
    rows = norm_ledger_series(traj, cfg.physics.a, cfg.physics.b)
    write_ledger_csv(out / "norms.csv", rows)
    led = traj.ledger
    report = {
        "command": "run-hartree",
        "config": cfg.to_text(),
        "flags": traj.flags,
        "stamps": traj.times,
        "rank": int(gamma0.rank_bound),
        "mass_drift": max(abs(r["mass"] - led[0]["mass"]) for r in led),
        "energy_drift": max(abs(r["energy"] - led[0]["energy"]) for r in led),
        "final": led[-1],
        "norms_final": rows[-1],
    }
    write_json(out / "report.json", report)
    log.info("run-hartree: %d stamps, mass drift %.2e", len(traj.times), report["mass_drift"])
    return _trajectory_exit(traj.flags)


def cmd_run_vlasov(cfg: ExperimentConfig, out: Path, args) -> int:
    from .phase_space import classical_density, vlasov_evolve, wigner_vlasov_distance, write_distribution
    from .propagators import load_trajectory, write_ledger_csv

    if cfg.grid.d != 1:
        raise CommandError("Vlasov runs are implemented for d = 1 only", EXIT_CONFIG)
    f0 = classical_seed(cfg)
    ti = cfg.time
    traj = vlasov_evolve(f0, cfg.potential_spec(), ti.T, ti.dt, stride=ti.stride)
    rows = []
    for t, f in zip(traj.times, traj.states):
        rho = classical_density(f)
        rows.append({"t": t, "mass": f.mass, "min": float(f.values.min()), "max": float(f.values.max()),
                     "rho_sup": float(rho.max())})
    out.mkdir(parents=True, exist_ok=True)
    write_ledger_csv(out / "vlasov_ledger.csv", rows)
    if "bin" in cfg.output.formats:
        (out / "phase_space").mkdir(exist_ok=True)
        for i, f in enumerate(traj.states):
            with open(out / "phase_space" / f"f_{i:05d}.bin", "wb") as fp:
                write_distribution(fp, f)
    report = {"command": "run-vlasov", "config": cfg.to_text(), "flags": traj.flags,
              "stamps": traj.times, "mass_drift": max(abs(r["mass"] - rows[0]["mass"]) for r in rows)}
    if (out / "manifest.json").exists():
        # compare with a Hartree run stored in the same directory
        q = load_trajectory(out)
        if q.grid == f0.qgrid:
            dist = []
            for t, f in zip(traj.times, traj.states):
                try:
                    A = q.snapshot(t)
                except ValueError:
                    continue
                d = wigner_vlasov_distance(A, f)
                dist.append({"t": t, "weak": d.weak, "l2": d.l2})
            report["wigner_distance"] = dist
            report["distance_note"] = "weak = max over a fixed panel of 16 bump test functions (surrogate topology)"
    write_json(out / "vlasov_report.json", report)
    return EXIT_CONTAMINATED if traj.flags.get("boundary_contaminated") else EXIT_OK


def cmd_sweep_hbar(cfg: ExperimentConfig, out: Path, args) -> int:
    from .harness import hbar_sweep
    from .propagators import BoundaryContamination

    w = cfg.potential_spec()
    times = cfg.stamp_times()
    threshold = 2.0 if w.is_zero else 4.0
    try:
        report = hbar_sweep(lambda h: initial_state(cfg, h), cfg.physics.hbars, times, w, cfg.time.dt,
                            tuple(cfg.time.window), cfg.physics.sigma, threshold,
                            control_state=rank_one_state(cfg, 1.0))
    except BoundaryContamination as exc:
        raise CommandError(str(exc), EXIT_CONTAMINATED) from exc
    except ValueError as exc:
        raise CommandError(f"sweep failed: {exc}", EXIT_CONFIG) from exc
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(report.to_json(cfg.to_text()) + "\n")
    lines = ["t," + ",".join(f"rho_sup_hbar{m.hbar:g}" for m in report.members)]
    for j, t in enumerate(times):
        lines.append(repr(float(t)) + "," + ",".join(repr(m.series[j]) for m in report.members))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    log.info("sweep-hbar: uniformity ratio %.3f (threshold %g)", report.uniformity_ratio, threshold)
    if report.tainted:
        return EXIT_CONTAMINATED
    return EXIT_OK if report.passing else EXIT_FAIL


def cmd_check_identities(cfg: ExperimentConfig, out: Path, args) -> int:
    from .identities import identity_suite

    report = identity_suite(cfg.identity_config())
    out.mkdir(parents=True, exist_ok=True)
    payload = json.loads(report.to_json())
    payload["config_text"] = cfg.to_text()
    write_json(out / "identities.json", payload)
    for name, r in report.results.items():
        log.info("%-20s %s", name, "pass" if r.passing else "FAIL")
    return EXIT_OK if report.passing else EXIT_FAIL


def cmd_fit_decay(cfg: ExperimentConfig, out: Path, args) -> int:
    from .harness import decay_fit
    from .propagators import read_ledger_csv

    src = out / "norms.csv"
    if not src.exists():
        raise CommandError(f"no ledger at {src}; run run-hartree first", EXIT_CONFIG)
    rows = read_ledger_csv(src)
    t = [r["t"] for r in rows]
    payload = {"command": "fit-decay", "config": cfg.to_text(), "fits": {}}
    for col in ("rho_sup",):
        try:
            fit = decay_fit(t, [r[col] for r in rows], tuple(cfg.time.window), args.abscissa)
        except ValueError as exc:
            raise CommandError(f"decay fit failed: {exc}", EXIT_FAIL) from exc
        payload["fits"][col] = asdict(fit)
    write_json(out / "fit.json", payload)
    return EXIT_OK


def cmd_quantize(cfg: ExperimentConfig, out: Path, args) -> int:
    hbar = cfg.physics.hbar
    A = initial_state(cfg, hbar)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gamma0.bin", "wb") as fp:
        write_operator(fp, A)
    _, occ = hermitian_eig(A)
    payload = {
        "command": "quantize",
        "config": cfg.to_text(),
        "rank": int(occ.size),
        "trace_mass": float((A.scale * A.trace()).real),
        "min_eigenvalue": float(occ.min()) if occ.size else 0.0,
        "x_sigma": x_sigma_norm(A, cfg.physics.sigma).as_dict(),
    }
    if cfg.data.seed == "toeplitz":
        payload["classical_mass"] = classical_seed(cfg).mass
    write_json(out / "quantize.json", payload)
    return EXIT_OK


def cmd_dispersive(cfg: ExperimentConfig, out: Path, args) -> int:
    from .harness import dispersive_constant, free_dispersive_limit, phase_from_trajectory, probe_grid
    from .propagators import load_trajectory

    if cfg.grid.d != 1:
        raise CommandError("dispersive probes are implemented for d = 1", EXIT_CONFIG)
    hbar = cfg.physics.hbar
    times = [t for t in cfg.stamp_times() if t > 0]
    pg = probe_grid(hbar, max(times))
    free, free_series = dispersive_constant(times, hbar, pg, detail=True)
    payload = {"command": "dispersive", "config": cfg.to_text(), "times": times,
               "limit": free_dispersive_limit(1), "free": free, "free_series": free_series,
               "probe_grid": {"n": pg.n, "L": pg.L}}
    if (out / "manifest.json").exists():
        traj = load_trajectory(out)
        stamps = [t for t in traj.times if t > 0]
        val, series = dispersive_constant(stamps, traj.hbar, probe_grid(traj.hbar, max(stamps)),
                                          phase_from_trajectory(traj), detail=True)
        payload.update({"interacting": val, "interacting_series": series, "interacting_times": stamps,
                        "ratio_to_free": val / free})
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "dispersive.json", payload)
    return EXIT_OK


HANDLERS = {
    "run-hartree": cmd_run_hartree,
    "run-vlasov": cmd_run_vlasov,
    "sweep-hbar": cmd_sweep_hbar,
    "check-identities": cmd_check_identities,
    "fit-decay": cmd_fit_decay,
    "quantize": cmd_quantize,
    "dispersive": cmd_dispersive,
}


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="schartree", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--out", default=None, help="output directory (overrides output.directory)")
    parser.add_argument("--resume", action="store_true", help="continue a stored run-hartree trajectory")
    parser.add_argument("--threads", type=int, default=None, help=f"FFT threads (overrides ${THREADS_ENV})")
    parser.add_argument("--paper-literal", dest="literal_coherent", action="store_true",
                        help="use the alternative coherent-state convention for Toeplitz seeds")
    parser.add_argument("--abscissa", choices=("t", "japanese"), default="t",
                        help="fit-decay abscissa: t or <t>")
    parser.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            log.error("--threads must be >= 1")
            return EXIT_CONFIG
        os.environ[THREADS_ENV] = str(args.threads)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.literal_coherent:
            cfg.physics.literal_coherent = True
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    out = Path(args.out if args.out is not None else cfg.output.directory)
    try:
        return HANDLERS[args.command](cfg, out, args)
    except CommandError as exc:
        log.error("%s", exc)
        return exc.code
    except FloatingPointError as exc:
        log.error("numerical divergence: %s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
