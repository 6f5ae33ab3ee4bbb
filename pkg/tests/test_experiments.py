import json
from pathlib import Path

import numpy as np
import pytest

from ddopt.config import ExperimentConfig, load_config, read_file, resolve, to_ini
from ddopt.errors import ConfigError, InsufficientDataError
from ddopt.optimizers.runner import run_online
from ddopt.experiments import (
    aggregate_columns,
    build_scenario,
    case_study_polarized,
    case_study_recommender,
    loglog_slope,
    rate_sweep,
    replicate,
    run_trials,
    write_outputs,
    _plan,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
NO_ENV: dict = {}

SMALL_POLARIZED = ["dim=5", "size=60", "T=40", "n_trials=3", "n_mb=10", "eta=0.05",
                   "restarts=2", "w1_sample=16"]
SMALL_RECOMMENDER = ["dim=10", "budget=25", "T=200", "dfo_trials=3", "restarts=2"]


def small(path, extra=(), profile=None):
    base = SMALL_POLARIZED if "polarized" in path else SMALL_RECOMMENDER
    return load_config(CONFIGS / path, profile, base + list(extra), env=NO_ENV)


# ---- configuration ----------------------------------------------------------

def test_shipped_configs_hold_the_case_study_parameters():
    pol = load_config(CONFIGS / "polarized.cfg", env=NO_ENV)
    assert (pol.dim, pol.lam, pol.sigma, pol.eta, pol.n_mb, pol.n_trials, pol.T) == \
        (20, 0.4, 0.5, 0.005, 50, 20, 2000)
    assert pol.population_size == 500
    rec = load_config(CONFIGS / "recommender.cfg", env=NO_ENV)
    assert (rec.dim, rec.lambda1, rec.lambda2, rec.epsilon, rec.rho) == (100, 0.2, 0.5, 0.5, 0.1)
    assert (rec.budget, rec.qbar, rec.eta, rec.dfo_eta, rec.dfo_delta, rec.dfo_trials, rec.T) == \
        (250, 5, 0.5, 0.1, 2, 20, 500)
    sweep = load_config(CONFIGS / "rate_sweep.cfg", env=NO_ENV)
    assert sweep.horizons == (400, 1600, 6400) and sweep.n_trials == 10


def test_paper_profile_doubles_the_population():
    assert load_config(CONFIGS / "polarized.cfg", "paper", env=NO_ENV).population_size == 1000
    explicit = load_config(CONFIGS / "polarized.cfg", "paper", ["size=300"], env=NO_ENV)
    assert explicit.population_size == 300


def test_precedence_file_env_override():
    cfg = load_config(CONFIGS / "polarized.cfg", env={"DDOPT_SEED": "7"})
    assert cfg.seed == 7
    cfg = load_config(CONFIGS / "polarized.cfg", overrides=["seed=9", "algorithm.eta=0.01"],
                      env={"DDOPT_SEED": "7"})
    assert (cfg.seed, cfg.eta) == (9, 0.01)
    assert cfg.overrides == ("seed=9", "algorithm.eta=0.01")


@pytest.mark.parametrize("override", ["nonsense=1", "eta=abc", "eta", "eta=-1",
                                      "algorithms=sgd", "n_mb=600", "scenario=other"])
def test_bad_overrides_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_config(CONFIGS / "polarized.cfg", overrides=[override], env=NO_ENV)


def test_missing_file_names_the_path(tmp_path):
    missing = tmp_path / "nope.cfg"
    with pytest.raises(ConfigError, match="nope.cfg"):
        read_file(missing)


def test_describe_output_round_trips(tmp_path):
    cfg = load_config(CONFIGS / "recommender.cfg", overrides=["eta=0.25"], env=NO_ENV)
    path = tmp_path / "resolved.cfg"
    path.write_text(to_ini(cfg))
    again = load_config(path, env=NO_ENV)
    assert again == cfg
    # every field appears, so nothing is left implicit
    assert to_ini(cfg).count(" = ") == len(cfg.as_sections()["experiment"]) + sum(
        len(v) for k, v in cfg.as_sections().items() if k != "experiment")


def test_defaults_without_a_file():
    cfg = resolve(env=NO_ENV)
    assert cfg == ExperimentConfig()


# ---- case studies -----------------------------------------------------------

@pytest.fixture(scope="module")
def polarized_result():
    return case_study_polarized(small("polarized.cfg"), jobs=1)


def test_polarized_records_have_expected_shape(polarized_result):
    res = polarized_result
    assert set(res.records) == {"vanilla", "composite"}
    for recs in res.records.values():
        assert [r.trial for r in recs] == [0, 1, 2]
        for r in recs:
            assert len(r) == 41
            for name, col in r.columns().items():
                assert np.all(np.isfinite(col)), name
    assert np.linalg.norm(res.oracle.u_star) <= 1 + 1e-12
    assert res.reference.value_star == pytest.approx(res.oracle.value_star)


def test_polarized_metadata(polarized_result):
    meta = polarized_result.metadata
    assert meta["certificate"]["available"] is False
    assert meta["ground_metric"] == "euclidean"
    assert set(meta["angles"]) >= {"initial_80_100_vs_ustar", "composite_final_40_80"}
    assert meta["seeds"]["trials"]["composite"] == [0, 1, 2]
    json.dumps(meta)


def test_replicate_envelope_brackets_the_mean(polarized_result):
    env = replicate(polarized_result.records["composite"])
    for e in env.values():
        assert np.all(e.low <= e.mean + 1e-15) and np.all(e.mean <= e.high + 1e-15)


def test_trial_order_does_not_change_results(polarized_result):
    res = polarized_result
    plan = _plan(res.config, res.scenario, res.reference)
    reversed_records = run_trials(plan[::-1])
    by_key = {(r.algorithm, r.trial): r for r in reversed_records}
    for alg, recs in res.records.items():
        for r in recs:
            assert by_key[(alg, r.trial)].to_csv() == r.to_csv()


def test_parallel_trials_match_serial(polarized_result):
    res = polarized_result
    plan = _plan(res.config, res.scenario, res.reference)
    parallel = run_trials(plan, jobs=2)
    serial = [r for alg in res.config.algorithms for r in res.records[alg]]
    assert [r.to_csv() for r in parallel] == [r.to_csv() for r in serial]


def test_write_outputs_is_byte_stable(polarized_result, tmp_path):
    a = write_outputs(polarized_result, tmp_path / "a")
    again = case_study_polarized(small("polarized.cfg"), jobs=1)
    b = write_outputs(again, tmp_path / "b")
    assert a["aggregate"].read_bytes() == b["aggregate"].read_bytes()
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "composite_trial002.csv" in names and "metadata.json" in names
    header = a["aggregate"].read_text().splitlines()[0].split(",")
    assert header[:3] == ["algorithm", "iter", "grad_sq_mean"]
    trial = (tmp_path / "a" / "vanilla_trial000.csv").read_text().splitlines()
    assert trial[0].startswith("iter,objective,opt_gap_rel")
    assert len(trial) == 42


def test_aggregate_columns_align(polarized_result):
    cols = aggregate_columns(polarized_result)
    lengths = {len(v) for v in cols.values()}
    assert lengths == {2 * 41}


def test_overrides_are_echoed_in_metadata():
    cfg = small("polarized.cfg", ["eta=0.01", "T=5", "n_trials=1"])
    res = case_study_polarized(cfg)
    assert "eta=0.01" in res.metadata["overrides"]
    assert res.metadata["config"]["algorithm"]["eta"] == 0.01


def test_recommender_study():
    res = case_study_recommender(small("recommender.cfg"))
    assert set(res.records) == {"vanilla", "dfo", "composite"}
    assert len(res.records["dfo"]) == 3 and len(res.records["composite"]) == 1
    u = res.oracle.u_star
    assert abs(u.sum() - 25) <= 1e-9 and np.all(u >= 0) and np.all(u <= 5)
    s = res.summary()
    assert s["composite"]["final_gap"] < s["vanilla"]["final_gap"]
    assert s["composite"]["final_w1"] < s["vanilla"]["final_w1"]
    cert = res.metadata["certificate"]
    assert cert["available"] and cert["Lfp"] == pytest.approx(0.2)


def test_recommender_gradient_runs_do_not_depend_on_the_sampling_seed():
    # single user with a full batch: no mini-batch randomness enters the loop
    cfg = small("recommender.cfg", ["T=30"])
    sc = build_scenario(cfg)
    for alg in ("vanilla", "composite"):
        runs = [run_online(alg, sc.model, sc.objective, sc.constraint, sc.population, cfg.T,
                           cfg.eta, 1, seed, ground_metric="index_abs") for seed in (0, 99)]
        assert runs[0].decisions.tobytes() == runs[1].decisions.tobytes()


def test_wrong_scenario_is_rejected():
    with pytest.raises(ValueError):
        case_study_recommender(small("polarized.cfg"))


# ---- rate sweep ---------------------------------------------------------------

def sweep_cfg(extra=()):
    return load_config(CONFIGS / "rate_sweep.cfg", overrides=["n_trials=4", *extra], env=NO_ENV)


def test_loglog_slope_needs_three_points():
    assert loglog_slope([1, 10, 100], [1, 0.1, 0.01])[0] == pytest.approx(-1.0)
    with pytest.raises(InsufficientDataError):
        loglog_slope([1, 10], [1, 0.1])
    with pytest.raises(InsufficientDataError):
        rate_sweep(sweep_cfg(), horizons=[100, 200])


def test_sweep_is_deterministic():
    a = rate_sweep(sweep_cfg(), horizons=[50, 100, 200])
    b = rate_sweep(sweep_cfg(), horizons=[50, 100, 200])
    assert a.to_csv() == b.to_csv()
    np.testing.assert_allclose(a.etas, 0.5 / np.sqrt([50, 100, 200]))


def test_doubling_the_horizon_shrinks_average_gradient_by_about_root_two():
    res = rate_sweep(sweep_cfg(["n_trials=10"]), horizons=[800, 1600, 3200])
    ratios = res.avg_sq_grad[:-1] / res.avg_sq_grad[1:]
    assert np.all((ratios >= 1.2) & (ratios <= 1.8)), ratios


def test_noise_free_sweep_is_at_least_first_order():
    res = rate_sweep(sweep_cfg(["noise_free=true"]))
    assert res.slope <= -1.0 + 1e-9


def test_build_scenario_is_seeded():
    a = build_scenario(sweep_cfg())
    b = build_scenario(sweep_cfg())
    assert a.model.A.tobytes() == b.model.A.tobytes()
    assert a.objective.targets.tobytes() == b.objective.targets.tobytes()
