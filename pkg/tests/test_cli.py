import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ddopt.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
POLARIZED = str(CONFIGS / "polarized.cfg")
RECOMMENDER = str(CONFIGS / "recommender.cfg")
SWEEP = str(CONFIGS / "rate_sweep.cfg")
SMALL = ["--set", "dim=5", "--set", "size=60", "--set", "T=20", "--set", "n_trials=2",
         "--set", "n_mb=10", "--set", "restarts=2", "--set", "w1_sample=16"]


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv("DDOPT_SEED", raising=False)


def test_run_writes_outputs_and_summaries(tmp_path, capsys):
    code = main(["run", "--config", POLARIZED, "--profile", "fast", "--out", str(tmp_path),
                 "--jobs", "1", *SMALL, "--set", "eta=0.01"])
    out = capsys.readouterr().out
    assert code == 0
    assert (tmp_path / "aggregate.csv").is_file()
    assert "composite: final_gap=" in out and "final_w1=" in out
    assert "vanilla: final_gap=" in out
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert "eta=0.01" in meta["overrides"]
    assert meta["config"]["algorithm"]["eta"] == 0.01
    assert meta["config"]["experiment"]["profile"] == "fast"


def test_missing_config_exits_two_and_names_the_path(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    assert main(["run", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_override_exits_two(capsys):
    assert main(["describe", "--config", POLARIZED, "--set", "no_such_key=1"]) == 2
    assert "no_such_key" in capsys.readouterr().err


def test_describe_prints_every_value(capsys):
    assert main(["describe", "--config", POLARIZED, "--set", "eta=0.02"]) == 0
    out = capsys.readouterr().out
    assert "[algorithm]" in out and "eta = 0.02" in out
    assert "restarts = 10" in out and "horizons = 400, 1600, 6400" in out


def test_check_all_suites_pass(capsys):
    assert main(["check"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS ") for line in lines)


def test_check_suite_filter(capsys):
    assert main(["check", "--suite", "sensitivity"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 and lines[0].startswith("PASS sensitivity")


@pytest.mark.parametrize("suite", ["sensitivity", "projection", "w1", "lyapunov", "vk",
                                   "steady_state"])
def test_injected_fault_is_reported(suite, capsys):
    assert main(["check", "--suite", suite, "--inject-fault", suite]) == 1
    out = capsys.readouterr().out
    assert out.startswith(f"FAIL {suite}")
    assert f"  {suite}: " in out


def test_oracle_on_recommender(tmp_path, capsys):
    args = ["oracle", "--config", RECOMMENDER, "--set", "dim=10", "--set", "budget=25",
            "--set", "restarts=2", "--out", str(tmp_path)]
    assert main(args) == 0
    first = json.loads((tmp_path / "oracle.json").read_text())
    u = np.array(first["u_star"])
    assert abs(u.sum() - 25) <= 1e-9 and np.all(u >= 0) and np.all(u <= 5)
    assert first["residual"] <= 1e-8
    assert "u* =" in capsys.readouterr().out
    assert main(args) == 0
    assert json.loads((tmp_path / "oracle.json").read_text())["u_star"] == first["u_star"]


def test_oracle_on_quadratic_recovers_least_squares_minimizer(tmp_path):
    from ddopt.config import load_config
    from ddopt.experiments import build_scenario

    assert main(["oracle", "--config", SWEEP, "--out", str(tmp_path)]) == 0
    u = np.array(json.loads((tmp_path / "oracle.json").read_text())["u_star"])
    sc = build_scenario(load_config(SWEEP, env={}))
    m = sc.model
    G = np.linalg.solve(np.eye(m.dim_state) - m.A, m.B)
    c = np.linalg.solve(np.eye(m.dim_state) - m.A, m.E @ sc.population.d.T).T
    w = sc.objective.weight
    expected = np.linalg.solve(G.T @ G + w * np.eye(G.shape[1]),
                               G.T @ (sc.objective.targets - c).mean(axis=0))
    np.testing.assert_allclose(u, expected, atol=1e-8)


def test_oracle_non_convergence_exits_one(tmp_path, capsys):
    args = ["oracle", "--config", SWEEP, "--set", "max_iter=1", "--set", "restarts=1",
            "--out", str(tmp_path)]
    assert main(args) == 1
    assert "best residual" in capsys.readouterr().err


def test_sweep_requires_the_sweep_scenario(capsys):
    assert main(["sweep", "--config", POLARIZED]) == 2


def test_sweep_writes_table(tmp_path, capsys):
    args = ["sweep", "--config", SWEEP, "--set", "horizons=20,40,80", "--set", "n_trials=2",
            "--out", str(tmp_path), "--jobs", "1"]
    assert main(args) == 0
    assert "log-log slope=" in capsys.readouterr().out
    assert (tmp_path / "sweep.csv").read_text().startswith("T,eta,avg_sq_grad")


def test_seed_environment_variable(monkeypatch, capsys):
    monkeypatch.setenv("DDOPT_SEED", "42")
    assert main(["describe", "--config", POLARIZED]) == 0
    assert "seed = 42" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ddopt", "check", "--suite", "projection"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.startswith("PASS projection")
