import csv
import filecmp
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from azrp.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from azrp.env import DisorderLaw, build_iid_env
from azrp.flux import dilute_flux
from azrp.kinetics import JumpKernel
from azrp.measures import RateFunction
from azrp.pde import riemann_solution

TWO_ATOM = {"kind": "iid", "atoms": [[0.5, 0.5], [1.0, 0.5]]}


def invoke(tmp_path, command, config=None, *extra):
    argv = [command, "--out", str(tmp_path / "runs")]
    if config is not None:
        path = tmp_path / f"{command}-{abs(hash(json.dumps(config, sort_keys=True)))}.json"
        path.write_text(json.dumps(config))
        argv += ["--config", str(path)]
    argv += list(extra)
    return main(argv)


def last_run(capsys):
    out = capsys.readouterr().out.splitlines()
    return Path(out[0]), json.loads(out[1])


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ flux


def test_flux_default_emits_critical_speed(tmp_path, capsys):
    assert invoke(tmp_path, "flux") == EXIT_OK
    out, summary = last_run(capsys)
    assert summary["v_c"]["0.0"] == pytest.approx(0.64, abs=1e-9)
    assert summary["rho_c"] == pytest.approx(0.25)
    head = (out / "flux.csv").read_text().splitlines()
    assert any(line.startswith("# v_c(0)=0.64") for line in head)
    assert json.loads((out / "manifest.json").read_text())["command"] == "flux"


def test_flux_two_atom_spot_value(tmp_path, capsys):
    assert invoke(tmp_path, "flux", {"law": TWO_ATOM, "rho_max": 3.0}) == EXIT_OK
    out, _ = last_run(capsys)
    rows = np.loadtxt(out / "flux.csv", delimiter=",", comments="#", skiprows=6)
    assert np.interp(2 / 3, rows[:, 0], rows[:, 1]) == pytest.approx(0.25, abs=1e-5)


@pytest.mark.parametrize("config", [
    {"rho_max": 0.0},
    {"law": TWO_ATOM},
    {"vc_at": [0.3]},
    {"law": {"kind": "deterministic", "params": {"c": 0.0}}},
    {"law": {"kind": "iid", "atoms": [[0.0, 1.0]]}},
    {"bogus": 1},
])
def test_flux_config_errors(tmp_path, capsys, config):
    assert invoke(tmp_path, "flux", config) == EXIT_CONFIG


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["flux", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["flux", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["flux", "--seed", "-1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["flux", "--workers", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


# -------------------------------------------------------------- simulate


def test_simulate_empty_run(tmp_path, capsys):
    cfg = {"init": {"kind": "empty"}, "T": 20.0, "snapshots": [5.0, 10.0], "window": [0, 31]}
    assert invoke(tmp_path, "simulate", cfg) == EXIT_OK
    out, summary = last_run(capsys)
    assert summary["mean_current"] == 0.0
    rows = read_rows(out / "snapshots_r0.csv")
    assert {r["t"] for r in rows} == {"5.0", "10.0", "20.0"}
    assert all(r["occupancy"] == "0" for r in rows)


def test_simulate_ring_current(tmp_path, capsys):
    cfg = {"T": 500.0, "replicas": 8}
    assert invoke(tmp_path, "simulate", cfg, "--seed", "3") == EXIT_OK
    _, summary = last_run(capsys)
    assert abs(summary["mean_current"] - 0.15) < 3 * summary["stderr"]


def test_simulate_beta_above_c(tmp_path):
    assert invoke(tmp_path, "simulate", {"init": {"kind": "product", "value": 0.6}}) == EXIT_CONFIG


def test_simulate_runtime_error(tmp_path):
    cfg = {"law": {"kind": "iid", "atoms": [[1.0, 1.0]]}, "window": [0, 4], "boundary": "strict",
           "init": {"kind": "constant", "value": 5}, "T": 50.0}
    assert invoke(tmp_path, "simulate", cfg) == EXIT_RUNTIME


def test_replay_from_manifest_is_byte_identical(tmp_path, capsys):
    cfg = {"T": 30.0, "replicas": 2, "snapshots": [10.0], "trackers": [0, 100], "window": [0, 127]}
    assert invoke(tmp_path, "simulate", cfg, "--seed", "12345") == EXIT_OK
    first, _ = last_run(capsys)
    replay_root = tmp_path / "replay"
    assert main(["simulate", "--config", str(first / "manifest.json"), "--out", str(replay_root)]) == EXIT_OK
    second, _ = last_run(capsys)
    assert second.name == first.name
    cmp = filecmp.dircmp(first, second)
    assert sorted(cmp.common_files) == sorted(p.name for p in first.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(first, second, cmp.common_files, shallow=False)
    assert not mismatch and not errors


def test_manifest_command_mismatch(tmp_path, capsys):
    assert invoke(tmp_path, "flux") == EXIT_OK
    out, _ = last_run(capsys)
    assert main(["riemann", "--config", str(out / "manifest.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_env_file_is_hashed(tmp_path, capsys):
    env = build_iid_env(DisorderLaw.iid([(0.5, 0.5), (1.0, 0.5)]), (0, 63), seed=4)
    path = tmp_path / "env.json"
    env.save(path)
    assert invoke(tmp_path, "simulate", {"T": 5.0}, "--env-file", str(path)) == EXIT_OK
    out, summary = last_run(capsys)
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["env_file"]["sha256"]) == 64
    assert summary["env_hash"] == env.content_hash()


# --------------------------------------------------------- pde commands


def test_riemann_four_pieces(tmp_path, capsys):
    assert invoke(tmp_path, "riemann") == EXIT_OK
    out, summary = last_run(capsys)
    assert summary["facts"]["passed"]
    assert summary["v_c"] == pytest.approx(0.64, abs=1e-9)
    assert summary["l1_godunov"] < 0.02
    rows = read_rows(out / "riemann.csv")
    x = np.array([float(r["x"]) for r in rows])
    sol = np.array([float(r["riemann"]) for r in rows])
    assert np.all(sol[x < 0] == 1.0)
    assert np.all(sol[(x > 0) & (x < 0.64)] == 0.25)
    fan = (x > 0.64) & (x < 1.0)
    assert np.allclose(sol[fan], 1 / np.sqrt(x[fan]) - 1, atol=1e-8)
    assert np.all(sol[x > 1.0] == 0.0)
    # full round-trip precision: parsed values equal a fresh evaluation bit for bit
    fd = dilute_flux(0.2, RateFunction.mm1(), JumpKernel.nearest_neighbor(1.0))
    assert np.array_equal(sol, riemann_solution(fd, 1.0, 0.0, 1.0, x))


def test_riemann_bad_cfl(tmp_path):
    assert invoke(tmp_path, "riemann", {"cfl": 1.2}) == EXIT_CONFIG
    assert invoke(tmp_path, "riemann", {"cfl": 0.0}) == EXIT_CONFIG


def test_hydro_empty_distance_zero(tmp_path, capsys):
    cfg = {"rho0": {"kind": "empty"}, "N_list": [50], "K": 2}
    assert invoke(tmp_path, "hydro", cfg) == EXIT_OK
    _, summary = last_run(capsys)
    assert summary["distances"] == {"50": 0.0}


def test_converge_subcritical_separation(tmp_path, capsys):
    cfg = {"init": {"kind": "density", "value": 0.1}, "T_list": [200.0], "K": 100, "noise_reps": 50}
    assert invoke(tmp_path, "converge", cfg) == EXIT_OK
    _, summary = last_run(capsys)
    assert summary["distance"][0] >= 0.2


def test_converge_infinite_rho_c(tmp_path):
    assert invoke(tmp_path, "converge", {"law": TWO_ATOM, "T_list": [1.0], "K": 2}) == EXIT_CONFIG


def test_current_and_demo_commands(tmp_path, capsys):
    assert invoke(tmp_path, "current", {"window": [0, 63], "T": 200.0, "K": 4}) == EXIT_OK
    _, summary = last_run(capsys)
    assert summary["expected"] == pytest.approx(0.15)
    assert invoke(tmp_path, "current", {"beta": 0.7}) == EXIT_CONFIG
    assert invoke(tmp_path, "demo", {"peak_mass": 0, "T": 20.0, "K": 2}) == EXIT_OK
    _, summary = last_run(capsys)
    assert summary["current"] == 0.0
    assert invoke(tmp_path, "demo", {"kernel": {"p": 1.0}}) == EXIT_CONFIG


def test_localeq_command(tmp_path, capsys):
    cfg = {"N": 50, "K": 10, "cesaro": [0.5], "n_times": 5}
    assert invoke(tmp_path, "localeq", cfg) == EXIT_OK
    out, summary = last_run(capsys)
    assert summary["regime"] == "critical"
    assert {float(r["delta"]) for r in read_rows(out / "cesaro.csv")} == {0.0, 0.5}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "azrp", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("flux", "simulate", "riemann", "hydro", "converge", "localeq"):
        assert name in res.stdout
