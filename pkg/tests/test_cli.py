from __future__ import annotations

import json

import numpy as np
import pytest

from schartree import cli
from schartree.propagators import load_trajectory, read_ledger_csv

SMALL = """
[grid]
n = 256
L = 64.0
[physics]
hbar = 0.5
hbars = [1.0, 0.5]
potential = "gaussian"
kappa = 0.02
[data]
seed = "{seed}"
p_n = 128
p_L = 12.0
[time]
T = {T}
dt = 0.05
stride = 5
window = [0.25, {T}]
"""


def write_config(tmp_path, name="run.toml", seed="rank-one", T=2.0, extra=""):
    path = tmp_path / name
    path.write_text(SMALL.format(seed=seed, T=T) + extra)
    return path


def run(*argv):
    return cli.main(list(argv) + ["--quiet"])


def test_parser_lists_commands():
    p = cli.build_parser()
    for c in cli.COMMANDS:
        assert p.parse_args([c, "--config", "x.toml"]).command == c
    with pytest.raises(SystemExit):
        p.parse_args(["simulate", "--config", "x.toml"])


def test_run_hartree_outputs(tmp_path):
    cfg, out = write_config(tmp_path), tmp_path / "run"
    assert run("run-hartree", "--config", str(cfg), "--out", str(out)) == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["stamps"] == pytest.approx([0.25 * j for j in range(9)])
    assert report["mass_drift"] < 1e-10
    rows = read_ledger_csv(out / "norms.csv")
    assert len(rows) == 9 and "hess_L2" in rows[0]
    assert (out / "manifest.json").exists()
    assert load_trajectory(out).horizon == pytest.approx(2.0)


def test_run_hartree_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    run("run-hartree", "--config", str(cfg), "--out", str(a))
    run("run-hartree", "--config", str(cfg), "--out", str(b))
    assert (a / "norms.csv").read_bytes() == (b / "norms.csv").read_bytes()


def test_resume_matches_single_run(tmp_path):
    short, full = write_config(tmp_path, "short.toml", T=1.0), write_config(tmp_path, "full.toml", T=2.0)
    once, twice = tmp_path / "once", tmp_path / "twice"
    run("run-hartree", "--config", str(full), "--out", str(once))
    run("run-hartree", "--config", str(short), "--out", str(twice))
    assert run("run-hartree", "--config", str(full), "--out", str(twice), "--resume") == cli.EXIT_OK
    A, B = load_trajectory(once), load_trajectory(twice)
    assert A.times == B.times
    for x, y in zip(A.ledger, B.ledger):
        assert x["energy"] == pytest.approx(y["energy"], rel=1e-12)


def test_resume_refuses_mismatched_config(tmp_path):
    out = tmp_path / "run"
    run("run-hartree", "--config", str(write_config(tmp_path)), "--out", str(out))
    other = write_config(tmp_path, "other.toml", extra="")
    other.write_text(other.read_text().replace("dt = 0.05", "dt = 0.025"))
    assert run("run-hartree", "--config", str(other), "--out", str(out), "--resume") == cli.EXIT_CONFIG


def test_fit_decay_after_run(tmp_path):
    cfg, out = write_config(tmp_path), tmp_path / "run"
    run("run-hartree", "--config", str(cfg), "--out", str(out))
    assert run("fit-decay", "--config", str(cfg), "--out", str(out), "--abscissa", "japanese") == cli.EXIT_OK
    fit = json.loads((out / "fit.json").read_text())["fits"]["rho_sup"]
    assert fit["abscissa"] == "japanese" and fit["exponent"] < 0


def test_fit_decay_needs_ledger(tmp_path):
    assert run("fit-decay", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "none")) == cli.EXIT_CONFIG


def test_quantize_toeplitz(tmp_path):
    cfg, out = write_config(tmp_path, seed="toeplitz"), tmp_path / "q"
    assert run("quantize", "--config", str(cfg), "--out", str(out)) == cli.EXIT_OK
    payload = json.loads((out / "quantize.json").read_text())
    assert payload["min_eigenvalue"] > 0
    assert payload["trace_mass"] == pytest.approx(payload["classical_mass"], rel=1e-6)
    assert (out / "gamma0.bin").stat().st_size > 0


def test_quantize_then_file_seed(tmp_path):
    q = tmp_path / "q"
    run("quantize", "--config", str(write_config(tmp_path, seed="toeplitz")), "--out", str(q))
    cfg = write_config(tmp_path, "file.toml", seed="file", T=1.0)
    cfg.write_text(cfg.read_text().replace('seed = "file"', f'seed = "file"\npath = "{q / "gamma0.bin"}"'))
    assert run("run-hartree", "--config", str(cfg), "--out", str(tmp_path / "r")) == cli.EXIT_OK
    wrong = write_config(tmp_path, "wrong.toml", seed="file")
    wrong.write_text(wrong.read_text().replace('seed = "file"', f'seed = "file"\npath = "{q / "gamma0.bin"}"')
                     .replace("hbar = 0.5", "hbar = 0.25"))
    assert run("run-hartree", "--config", str(wrong), "--out", str(tmp_path / "w")) == cli.EXIT_CONFIG


def test_dispersive_free_and_interacting(tmp_path):
    cfg, out = write_config(tmp_path), tmp_path / "run"
    assert run("dispersive", "--config", str(cfg), "--out", str(out)) == cli.EXIT_OK
    free = json.loads((out / "dispersive.json").read_text())
    assert "interacting" not in free and free["free"] <= free["limit"] * (1 + 1e-6)
    run("run-hartree", "--config", str(cfg), "--out", str(out))
    run("dispersive", "--config", str(cfg), "--out", str(out))
    both = json.loads((out / "dispersive.json").read_text())
    assert 0.5 < both["ratio_to_free"] < 2.0


def test_sweep_hbar(tmp_path):
    cfg, out = write_config(tmp_path, seed="toeplitz", T=2.0), tmp_path / "s"
    code = run("sweep-hbar", "--config", str(cfg), "--out", str(out))
    raw = json.loads((out / "sweep.json").read_text())
    assert code == (cli.EXIT_OK if raw["passing"] else cli.EXIT_FAIL)
    assert raw["hbars"] == [1.0, 0.5] and raw["control"] is not None
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "t,rho_sup_hbar1,rho_sup_hbar0.5" and len(lines) == 10


def test_run_vlasov_and_distance(tmp_path):
    cfg, out = write_config(tmp_path, seed="toeplitz", T=1.0), tmp_path / "v"
    run("run-hartree", "--config", str(cfg), "--out", str(out))
    assert run("run-vlasov", "--config", str(cfg), "--out", str(out)) == cli.EXIT_OK
    report = json.loads((out / "vlasov_report.json").read_text())
    assert report["mass_drift"] < 1e-8
    assert len(report["wigner_distance"]) == 5
    assert all(np.isfinite(d["weak"]) for d in report["wigner_distance"])


def test_check_identities(tmp_path):
    cfg = tmp_path / "id.toml"
    cfg.write_text("[grid]\nn = 256\nL = 40.0\n[physics]\nhbar = 0.5\n[identities]\npairs = 'diagonal'\n")
    out = tmp_path / "id"
    assert run("check-identities", "--config", str(cfg), "--out", str(out)) == cli.EXIT_OK
    payload = json.loads((out / "identities.json").read_text())
    assert payload["passing"] is True and "config_text" in payload


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\nn = 100\n")
    assert run("run-hartree", "--config", str(bad), "--out", str(tmp_path / "o")) == cli.EXIT_CONFIG
    assert run("quantize", "--config", str(tmp_path / "missing.toml")) == cli.EXIT_CONFIG
    assert run("quantize", "--config", str(write_config(tmp_path)), "--threads", "0") == cli.EXIT_CONFIG
    narrow = write_config(tmp_path, "narrow.toml")
    narrow.write_text(narrow.read_text().replace("window = [0.25, 2.0]", "window = [1.5, 2.0]"))
    assert run("sweep-hbar", "--config", str(narrow), "--out", str(tmp_path / "s")) == cli.EXIT_CONFIG


def test_vlasov_rejects_d2(tmp_path):
    cfg = tmp_path / "d2.toml"
    cfg.write_text("[grid]\nd = 2\nn = 32\nL = 16.0\n[data]\np_n = 32\np_L = 8.0\n")
    assert run("run-vlasov", "--config", str(cfg), "--out", str(tmp_path / "o")) == cli.EXIT_CONFIG


def test_contamination_exits_3(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[grid]\nn = 64\nL = 8.0\n[physics]\nhbar = 1.0\npotential = 'gaussian'\n"
                   "[data]\nseed = 'rank-one'\n[time]\nT = 10.0\ndt = 0.05\nstride = 20\n")
    assert run("run-hartree", "--config", str(cfg), "--out", str(tmp_path / "o")) == cli.EXIT_CONTAMINATED
