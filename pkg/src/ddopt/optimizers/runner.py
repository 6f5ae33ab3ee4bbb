"""Closed-loop harness: the decision-maker and the population take turns.

Iteration ``k`` records diagnostics for ``(u_k, p_k)``, computes ``u_{k+1}``
from samples of ``p_k`` and then evolves every individual once,
``p_{k+1} = f(p_k, u_{k+1}, d)``.  A record of horizon ``T`` therefore holds
``T + 1`` rows.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..distributions import Population, make_rng
from ..dynamics import DynamicsModel, SoftmaxDynamics, evolve_population, steady_state
from ..errors import DDOptError
from ..transport import w1_categorical_1d, w1_uniform_empirical, weighted_norm
from .algorithms import (
    DFOState,
    GradientEstimate,
    composite_gradient,
    decision_dim,
    sample_unit_sphere,
    step_dfo,
    vanilla_gradient,
)
from .oracle import reduced_evaluate

ALGORITHMS = ("composite", "vanilla", "dfo")
CSV_VERSION = "1"
CSV_COLUMNS = ("iter", "objective", "opt_gap_rel", "dist_to_ustar", "grad_norm",
               "grad_adapt_norm", "grad_anticipate_norm", "w1_to_ss", "v_k_estimate")

# independent random streams of one trial
MINIBATCH_STREAM = 1
DFO_STREAM = 2
W1_SUBSAMPLE_STREAM = 3

DIAGNOSTIC_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Reference:
    """Benchmark decision ``u*`` with its value and induced steady states."""

    u_star: np.ndarray
    value_star: float
    p_ss_star: np.ndarray

    @classmethod
    def from_decision(cls, model, objective, population: Population, u_star):
        u_star = np.asarray(u_star, dtype=float)
        p_ss = steady_state(model, u_star, population.d, tol=1e-12).p_ss
        value = float(np.mean(objective.value(u_star, p_ss)))
        return cls(u_star, value, p_ss)


@dataclass(eq=False)
class RunRecord:
    """Per-iteration trace of one trial.

    ``grad_sq`` holds the squared norm of the exact reduced gradient when it
    was tracked and the squared norm of the algorithm's estimate otherwise.
    """

    algorithm: str
    trial: int
    iters: np.ndarray
    objective: np.ndarray
    opt_gap_rel: np.ndarray
    dist_to_ustar: np.ndarray
    grad_norm: np.ndarray
    grad_adapt_norm: np.ndarray
    grad_anticipate_norm: np.ndarray
    w1_to_ss: np.ndarray
    v_k_estimate: np.ndarray
    grad_sq: np.ndarray
    decisions: np.ndarray
    initial_state: np.ndarray
    final_state: np.ndarray
    config: dict[str, Any] = field(default_factory=dict)
    wall_time: float = 0.0

    def __len__(self):
        return self.iters.shape[0]

    def columns(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, "iters" if name == "iter" else name) for name in CSV_COLUMNS}

    def summary(self) -> dict[str, float]:
        return {
            "final_gap": float(self.opt_gap_rel[-1]),
            "final_distance": float(self.dist_to_ustar[-1]),
            "final_w1": float(self.w1_to_ss[-1]),
            "final_objective": float(self.objective[-1]),
            "wall_time": float(self.wall_time),
        }

    def to_csv(self) -> str:
        return format_csv(self.columns())


def format_value(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def format_csv(columns: dict[str, np.ndarray]) -> str:
    """Comma-separated table with a header row; floats printed with ``repr``."""
    names = list(columns)
    buf = io.StringIO()
    buf.write(",".join(names) + "\n")
    n = len(next(iter(columns.values())))
    for i in range(n):
        buf.write(",".join(format_value(columns[c][i]) for c in names) + "\n")
    return buf.getvalue()


def _relative_gap(value, reference: Reference | None, maximize: bool) -> float:
    if reference is None:
        return float("nan")
    diff = reference.value_star - value if maximize else value - reference.value_star
    return float(diff / max(abs(reference.value_star), 1e-300))


def _relative_distance(u, reference: Reference | None) -> float:
    if reference is None:
        return float("nan")
    scale = np.linalg.norm(reference.u_star)
    dist = np.linalg.norm(u - reference.u_star)
    return float(dist / scale) if scale > 0 else float(dist)


class _Diagnostics:
    """Per-iteration measurements that need steady states; warm-started."""

    def __init__(self, model, objective, population, reference, P, w1_sample,
                 ground_metric, seed, track_exact_gradient):
        self.model = model
        self.objective = objective
        self.reference = reference
        self.P = P
        self.ground_metric = ground_metric
        self.track_exact_gradient = track_exact_gradient
        self.d = population.d
        self.warm = None
        n = len(population)
        if w1_sample is None or w1_sample >= n:
            self.subset = np.arange(n)
        else:
            rng = make_rng(seed, 0, W1_SUBSAMPLE_STREAM)
            self.subset = np.sort(rng.choice(n, int(w1_sample), replace=False))
        self.population = population

    def steady(self, u):
        p_ss = steady_state(self.model, u, self.d, tol=DIAGNOSTIC_TOL, p_init=self.warm).p_ss
        self.warm = p_ss
        return p_ss

    def w1(self, p) -> float:
        if self.reference is None:
            return float("nan")
        target = self.reference.p_ss_star
        if self.ground_metric == "index_abs":
            return float(np.mean([w1_categorical_1d(a, b) for a, b in zip(p, target)]))
        idx = self.subset
        P = self.P if self.ground_metric == "weighted_P" else None
        return w1_uniform_empirical(p[idx], target[idx], self.ground_metric, P)

    def measure(self, u, p):
        """Value at steady state, V_k estimate, W1 to the benchmark, exact gradient norm."""
        if self.track_exact_gradient:
            ev = reduced_evaluate(self.model, self.objective, u,
                                  self.population, p_init=self.warm, tol=DIAGNOSTIC_TOL)
            p_ss, value = ev.p_ss, ev.value
            self.warm = p_ss
            grad_sq = float(ev.grad @ ev.grad)
        else:
            p_ss = self.steady(u)
            value = float(np.mean(self.objective.value(u, p_ss)))
            grad_sq = float("nan")
        vk = float(np.mean(weighted_norm(p - p_ss, self.P)))
        return value, vk, self.w1(p), grad_sq


def _at_iteration(exc: DDOptError, k: int) -> DDOptError:
    exc.args = (f"iteration {k}: {exc.args[0] if exc.args else ''}",) + exc.args[1:]
    return exc


def default_ground_metric(model) -> str:
    return "index_abs" if isinstance(model, SoftmaxDynamics) else "euclidean"


def run_online(algorithm_id: str, model: DynamicsModel, objective, constraint,
               population: Population, T: int, eta: float, n_mb: int, seed: int,
               trial: int = 0, reference: Reference | None = None, P=None,
               w1_sample: int | None = 64, ground_metric: str | None = None,
               track_exact_gradient: bool = False, dfo_delta: float = 2.0,
               sensitivity_mode: str = "online", u0=None) -> RunRecord:
    """Run one trial of the closed loop for ``T`` decision updates.

    Mini-batches are drawn without replacement from the current population;
    when ``n_mb`` equals the population size the run is deterministic.  The
    derivative-free algorithm deploys its perturbed query ``u_k + delta v_k``
    to the population and observes the population-mean objective there.
    """
    if algorithm_id not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm_id!r}; expected one of {ALGORITHMS}")
    if T < 0:
        raise ValueError("T must be nonnegative")
    if not eta > 0:
        raise ValueError("step size must be positive")
    if not 1 <= n_mb <= len(population):
        raise ValueError(f"mini-batch size {n_mb} outside [1, {len(population)}]")
    started = time.perf_counter()
    ground_metric = ground_metric or default_ground_metric(model)
    n = decision_dim(model, population)
    u = constraint.initial(n) if u0 is None else constraint.project(np.asarray(u0, dtype=float))
    rng = make_rng(seed, trial, MINIBATCH_STREAM)
    diag = _Diagnostics(model, objective, population, reference, P, w1_sample,
                        ground_metric, seed, track_exact_gradient)
    dfo = None
    if algorithm_id == "dfo":
        dfo_rng = make_rng(seed, trial, DFO_STREAM)
        dfo = DFOState(u, sample_unit_sphere(n, dfo_rng))
    pop = population

    rows = {name: np.empty(T + 1) for name in CSV_COLUMNS}
    rows["iter"] = np.arange(T + 1)
    grad_sq = np.empty(T + 1)
    decisions = np.empty((T + 1, n))
    everyone = np.arange(len(population))
    for k in range(T + 1):
        try:
            value, vk, w1, gsq = diag.measure(u, pop.p)
        except DDOptError as exc:
            raise _at_iteration(exc, k)
        decisions[k] = u
        rows["objective"][k] = float(np.mean(objective.value(u, pop.p)))
        rows["opt_gap_rel"][k] = _relative_gap(value, reference, objective.maximize)
        rows["dist_to_ustar"][k] = _relative_distance(u, reference)
        rows["w1_to_ss"][k] = w1
        rows["v_k_estimate"][k] = vk
        if k == T:
            grad = None
        elif algorithm_id == "dfo":
            observed = float(np.mean(objective.value(dfo.query(dfo_delta), pop.p)))
            dfo, g = step_dfo(dfo, observed, dfo_delta, eta, constraint, dfo_rng,
                              maximize=objective.maximize)
            grad = GradientEstimate.from_terms(g, np.zeros_like(g))
            u = dfo.q
            deployed = dfo.query(dfo_delta)
        else:
            idx = everyone if n_mb == len(pop) else np.sort(rng.choice(len(pop), n_mb, replace=False))
            batch = pop.take(idx)
            try:
                if algorithm_id == "composite":
                    grad = composite_gradient(objective, model, u, batch, sensitivity_mode)
                else:
                    grad = vanilla_gradient(objective, u, batch)
            except DDOptError as exc:
                raise _at_iteration(exc, k)
            direction = grad.total if objective.maximize else -grad.total
            u = constraint.project(u + eta * direction)
            deployed = u
        if grad is None:
            # no update leaves the last row; repeat the previous gradient norms
            for name in ("grad_norm", "grad_adapt_norm", "grad_anticipate_norm"):
                rows[name][k] = rows[name][k - 1] if k > 0 else 0.0
            grad_sq[k] = gsq if track_exact_gradient else rows["grad_norm"][k] ** 2
            continue
        rows["grad_norm"][k] = np.linalg.norm(grad.total)
        rows["grad_adapt_norm"][k] = np.linalg.norm(grad.term_adapt)
        rows["grad_anticipate_norm"][k] = np.linalg.norm(grad.term_anticipate)
        grad_sq[k] = gsq if track_exact_gradient else rows["grad_norm"][k] ** 2
        try:
            pop = evolve_population(model, pop, deployed)
        except DDOptError as exc:
            raise _at_iteration(exc, k)

    return RunRecord(
        algorithm=algorithm_id,
        trial=trial,
        iters=rows["iter"],
        objective=rows["objective"],
        opt_gap_rel=rows["opt_gap_rel"],
        dist_to_ustar=rows["dist_to_ustar"],
        grad_norm=rows["grad_norm"],
        grad_adapt_norm=rows["grad_adapt_norm"],
        grad_anticipate_norm=rows["grad_anticipate_norm"],
        w1_to_ss=rows["w1_to_ss"],
        v_k_estimate=rows["v_k_estimate"],
        grad_sq=grad_sq,
        decisions=decisions,
        initial_state=population.p,
        final_state=pop.p,
        config={"algorithm": algorithm_id, "T": T, "eta": eta, "n_mb": n_mb, "seed": seed,
                "trial": trial, "ground_metric": ground_metric, "w1_sample": w1_sample,
                "sensitivity_mode": sensitivity_mode, "dfo_delta": dfo_delta,
                "u0": "projected zero" if u0 is None else "given"},
        wall_time=time.perf_counter() - started,
    )
