"""End-to-end case studies, trial replication and the convergence-rate sweep.

Every trial is keyed by ``(seed, trial index)`` so results do not depend on
the order, or the process, in which trials execute.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import ExperimentConfig
from .distributions import Population, make_rng, sample_gaussian, sample_hemisphere, sample_simplex
from .dynamics import (
    LinearDynamics,
    PolarizedDynamics,
    SoftmaxDynamics,
    contraction_certificate,
    spectral_radius,
)
from .errors import DDOptError, InsufficientDataError, UnsupportedCertificateError
from .optimizers.objectives import Affinity, GainEntropy, QuadraticTest
from .optimizers.oracle import OracleResult, oracle_solve, reduced_evaluate
from .optimizers.projections import CappedSimplex, NormBall, Unconstrained
from .optimizers.runner import CSV_VERSION, Reference, RunRecord, format_csv, run_online
from .transport import angle_mass_fraction, convergence_measures

MODEL_STREAM = 11
AGGREGATE_MEASURES = ("grad_sq", "opt_gap_rel", "dist_to_ustar", "w1_to_ss")


@dataclass(frozen=True, eq=False)
class Scenario:
    model: Any
    objective: Any
    constraint: Any
    population: Population


@dataclass(eq=False)
class ExperimentResult:
    config: ExperimentConfig
    scenario: Scenario
    oracle: OracleResult
    reference: Reference
    records: dict[str, list[RunRecord]]
    metadata: dict[str, Any] = field(default_factory=dict)

    def aggregate(self) -> dict[str, dict]:
        return {alg: replicate(recs) for alg, recs in self.records.items()}

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for alg, recs in self.records.items():
            out[alg] = {
                "final_gap": float(np.mean([r.opt_gap_rel[-1] for r in recs])),
                "final_distance": float(np.mean([r.dist_to_ustar[-1] for r in recs])),
                "final_w1": float(np.mean([r.w1_to_ss[-1] for r in recs])),
                "trials": len(recs),
            }
        return out


def random_linear_model(m: int, n: int, r: int, radius: float, seed: int) -> LinearDynamics:
    """Seeded linear dynamics with ``A`` rescaled to the requested spectral radius."""
    rng = make_rng(seed, 0, MODEL_STREAM)
    A = rng.standard_normal((m, m))
    A *= radius / spectral_radius(A)
    B = rng.standard_normal((m, n))
    E = rng.standard_normal((m, r))
    return LinearDynamics(A, B, E)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    if cfg.scenario == "polarized":
        model = PolarizedDynamics(cfg.lam, cfg.sigma)
        model.validate()
        return Scenario(model, Affinity(), NormBall(cfg.radius),
                        sample_hemisphere(cfg.dim, cfg.population_size, cfg.seed))
    if cfg.scenario == "recommender":
        model = SoftmaxDynamics(cfg.lambda1, cfg.lambda2, cfg.epsilon)
        model.validate()
        return Scenario(model, GainEntropy(cfg.rho), CappedSimplex(cfg.budget, cfg.qbar),
                        sample_simplex(cfg.dim, cfg.population_size, cfg.seed))
    model = random_linear_model(cfg.dim, cfg.dim_decision, cfg.dim_exo,
                                cfg.spectral_radius, cfg.seed)
    targets = make_rng(cfg.seed, 0, MODEL_STREAM + 1).standard_normal(cfg.dim)
    return Scenario(model, QuadraticTest(targets, cfg.weight), Unconstrained(),
                    sample_gaussian(cfg.dim, cfg.dim_exo, cfg.population_size, cfg.seed))


def solve_reference(cfg: ExperimentConfig, scenario: Scenario) -> tuple[OracleResult, Reference]:
    res = oracle_solve(scenario.model, scenario.objective, scenario.constraint,
                       scenario.population, restarts=cfg.oracle_restarts,
                       max_iter=cfg.oracle_max_iter, seed=cfg.seed, tol=cfg.oracle_tol)
    ref = Reference.from_decision(scenario.model, scenario.objective, scenario.population,
                                  res.u_star)
    return res, ref


def certificate_metadata(scenario: Scenario) -> dict[str, Any]:
    try:
        cert = contraction_certificate(scenario.model, dim=scenario.population.dim_state)
    except UnsupportedCertificateError as exc:
        return {"available": False, "reason": str(exc)}
    return {"available": True, "Lfp": cert.Lfp, "Lhu": cert.Lhu,
            "rho1": cert.rho1, "rho2": cert.rho2, "lambda_max_P": cert.lambda_max}


def _run_one(args) -> RunRecord:
    alg, scenario, cfg, trial, eta, reference = args
    try:
        return run_online(alg, scenario.model, scenario.objective, scenario.constraint,
                          scenario.population, cfg.T, eta, cfg.n_mb, cfg.seed, trial=trial,
                          reference=reference, w1_sample=cfg.w1_sample,
                          ground_metric=cfg.ground_metric, dfo_delta=cfg.dfo_delta,
                          sensitivity_mode=cfg.sensitivity_mode)
    except DDOptError as exc:
        exc.args = (f"{alg} trial {trial}: {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise


def run_trials(jobs_list, jobs: int = 1) -> list[RunRecord]:
    """Execute run specifications, in parallel when ``jobs > 1``; order is preserved."""
    if jobs <= 1 or len(jobs_list) <= 1:
        return [_run_one(a) for a in jobs_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, jobs_list))


def _plan(cfg: ExperimentConfig, scenario: Scenario, reference: Reference):
    plan = []
    for alg in cfg.algorithms:
        if cfg.scenario == "recommender":
            # deterministic single-user runs; only the derivative-free method is replicated
            trials = cfg.dfo_trials if alg == "dfo" else cfg.n_trials
        else:
            trials = cfg.n_trials
        eta = cfg.dfo_eta if alg == "dfo" else cfg.eta
        plan.extend((alg, scenario, cfg, t, eta, reference) for t in range(trials))
    return plan


def _group(records: list[RunRecord]) -> dict[str, list[RunRecord]]:
    out: dict[str, list[RunRecord]] = {}
    for r in records:
        out.setdefault(r.algorithm, []).append(r)
    return out


def _case_study(cfg: ExperimentConfig, expected: str, jobs: int) -> ExperimentResult:
    if cfg.scenario != expected:
        raise ValueError(f"config scenario is {cfg.scenario!r}, expected {expected!r}")
    started = time.perf_counter()
    scenario = build_scenario(cfg)
    oracle, reference = solve_reference(cfg, scenario)
    records = _group(run_trials(_plan(cfg, scenario, reference), jobs))
    result = ExperimentResult(cfg, scenario, oracle, reference, records)
    result.metadata = base_metadata(result)
    result.metadata["timing"] = {"wall_time": time.perf_counter() - started}
    return result


def case_study_polarized(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Opportunistic party vs. a polarized population: vanilla and composite trials.

    All trials share one hemisphere population and one benchmark ``u*``;
    trials differ in their mini-batch streams.
    """
    result = _case_study(cfg, "polarized", jobs)
    result.metadata["angles"] = angle_summary(result)
    return result


def case_study_recommender(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Single-user recommender with a budgeted price vector."""
    return _case_study(cfg, "recommender", jobs)


def angle_summary(result: ExperimentResult) -> dict[str, Any]:
    """Fractions of individuals whose angle to the decision lies in the bands of interest.

    The initial decision is the zero vector, so initial angles are measured
    against the benchmark ``u*``; final angles use each trial's final decision.
    """
    pop = result.scenario.population
    out: dict[str, Any] = {
        "initial_80_100_vs_ustar": angle_mass_fraction(pop.p, result.reference.u_star, 80, 100),
        "benchmark_40_80": angle_mass_fraction(result.reference.p_ss_star,
                                               result.reference.u_star, 40, 80),
    }
    for alg, recs in result.records.items():
        fr = [angle_mass_fraction(r.final_state, r.decisions[-1], 40, 80) for r in recs]
        out[f"{alg}_final_40_80"] = float(np.mean(fr))
    return out


def replicate(records: list[RunRecord]) -> dict[str, Any]:
    """Per-iteration mean and min/max envelope across trials."""
    return convergence_measures(records)


def base_metadata(result: ExperimentResult) -> dict[str, Any]:
    cfg = result.config
    pop = result.scenario.population
    meta: dict[str, Any] = {
        "csv_version": CSV_VERSION,
        "scenario": cfg.scenario,
        "config": cfg.as_sections(),
        "overrides": list(cfg.overrides),
        "seeds": {"master": cfg.seed,
                  "trials": {alg: [r.trial for r in recs] for alg, recs in result.records.items()},
                  "rng": "Philox keyed by (seed, trial, stream)"},
        "oracle": {"u_star": result.oracle.u_star.tolist(),
                   "value_star": result.oracle.value_star,
                   "residual": result.oracle.residual,
                   "restarts_converged": result.oracle.restarts_converged},
        "certificate": certificate_metadata(result.scenario),
        "ground_metric": cfg.ground_metric,
        "w1_reference": "steady state induced by the oracle decision u*",
        "initial_decision": "zero vector projected onto the constraint set",
        "summary": result.summary(),
    }
    if pop.reference is not None:
        meta["hemisphere_reference"] = pop.reference.tolist()
    return meta


def aggregate_columns(result: ExperimentResult) -> dict[str, list]:
    cols: dict[str, list] = {"algorithm": [], "iter": []}
    for m in AGGREGATE_MEASURES:
        for stat in ("mean", "min", "max"):
            cols[f"{m}_{stat}"] = []
    for alg in sorted(result.records):
        env = replicate(result.records[alg])
        n = len(result.records[alg][0])
        cols["algorithm"].extend([alg] * n)
        cols["iter"].extend(range(n))
        for m in AGGREGATE_MEASURES:
            cols[f"{m}_mean"].extend(env[m].mean)
            cols[f"{m}_min"].extend(env[m].low)
            cols[f"{m}_max"].extend(env[m].high)
    return cols


def _format_aggregate(cols: dict[str, list]) -> str:
    names = list(cols)
    lines = [",".join(names)]
    for i in range(len(cols["iter"])):
        row = [cols["algorithm"][i], str(int(cols["iter"][i]))]
        row += [repr(float(cols[c][i])) for c in names[2:]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_outputs(result: ExperimentResult, out_dir) -> dict[str, Path]:
    """One CSV per (algorithm, trial), an aggregate CSV and a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for alg, recs in sorted(result.records.items()):
        for r in recs:
            path = out / f"{alg}_trial{r.trial:03d}.csv"
            path.write_text(r.to_csv(), encoding="utf-8")
    agg = out / "aggregate.csv"
    agg.write_text(_format_aggregate(aggregate_columns(result)), encoding="utf-8")
    paths["aggregate"] = agg
    meta = out / "metadata.json"
    meta.write_text(json.dumps(result.metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["metadata"] = meta
    return paths


@dataclass(frozen=True, eq=False)
class RateSweepResult:
    horizons: np.ndarray
    avg_sq_grad: np.ndarray
    per_trial: np.ndarray
    slope: float
    intercept: float
    etas: np.ndarray

    def to_csv(self) -> str:
        return format_csv({"T": self.horizons, "eta": self.etas,
                           "avg_sq_grad": self.avg_sq_grad})


def loglog_slope(horizons, values) -> tuple[float, float]:
    horizons = np.asarray(horizons, dtype=float)
    values = np.asarray(values, dtype=float)
    if horizons.shape[0] < 3:
        raise InsufficientDataError("a slope fit needs at least three horizons")
    slope, intercept = np.polyfit(np.log(horizons), np.log(values), 1)
    return float(slope), float(intercept)


def gradient_descent_trace(scenario: Scenario, T: int, eta: float) -> np.ndarray:
    """Squared exact reduced-gradient norms along projected gradient steps (no sampling)."""
    u = scenario.constraint.initial(scenario.model.dim_decision)
    sign = 1.0 if scenario.objective.maximize else -1.0
    out = np.empty(T)
    for k in range(T):
        ev = reduced_evaluate(scenario.model, scenario.objective, u, scenario.population)
        out[k] = ev.grad @ ev.grad
        u = scenario.constraint.project(u + sign * eta * ev.grad)
    return out


def rate_sweep(cfg: ExperimentConfig, horizons=None, jobs: int = 1) -> RateSweepResult:
    """Average squared reduced-gradient norm against the horizon ``T``.

    Stochastic runs use ``eta = eta_scale / sqrt(T)`` and the composite
    algorithm on mini-batches.  With ``noise_free`` the exact reduced
    gradient drives plain gradient descent with the constant step ``eta``.
    """
    if cfg.scenario != "rate_sweep":
        raise ValueError(f"config scenario is {cfg.scenario!r}, expected 'rate_sweep'")
    horizons = np.asarray(cfg.horizons if horizons is None else horizons, dtype=int)
    if horizons.shape[0] < 3:
        raise InsufficientDataError("rate sweep needs at least three horizons")
    scenario = build_scenario(cfg)
    per_trial = np.empty((horizons.shape[0], cfg.n_trials))
    etas = np.empty(horizons.shape[0])
    for i, T in enumerate(horizons):
        if cfg.noise_free:
            etas[i] = cfg.eta
            per_trial[i, :] = gradient_descent_trace(scenario, int(T), etas[i]).mean()
            continue
        etas[i] = cfg.eta_scale / np.sqrt(T)
        specs = []
        for t in range(cfg.n_trials):
            specs.append((scenario, cfg, int(T), float(etas[i]), t))
        for t, rec in enumerate(_map(_sweep_run, specs, jobs)):
            per_trial[i, t] = rec
    avg = per_trial.mean(axis=1)
    slope, intercept = loglog_slope(horizons, avg)
    return RateSweepResult(horizons, avg, per_trial, slope, intercept, etas)


def _sweep_run(spec) -> float:
    scenario, cfg, T, eta, trial = spec
    rec = run_online("composite", scenario.model, scenario.objective, scenario.constraint,
                     scenario.population, T, eta, cfg.n_mb, cfg.seed, trial=trial,
                     track_exact_gradient=True, w1_sample=cfg.w1_sample)
    # average over the T iterates that produced an update
    return float(rec.grad_sq[:-1].mean()) if T > 0 else float(rec.grad_sq[0])


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def default_jobs() -> int:
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, jobs: int = 1):
    if cfg.scenario == "polarized":
        return case_study_polarized(cfg, jobs)
    if cfg.scenario == "recommender":
        return case_study_recommender(cfg, jobs)
    return rate_sweep(cfg, jobs=jobs)
