"""Online decision updates: composite (adaptation + anticipation),
vanilla (adaptation only) and the two-point derivative-free baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ..distributions import Individual, Population, draw_minibatch
from ..dynamics import (
    DynamicsModel,
    LinearDynamics,
    PolarizedDynamics,
    SoftmaxDynamics,
    rownorm,
    steady_state,
)
from ..sensitivity import polarized_sensitivity_batch, softmax_sensitivity_matrix

SENSITIVITY_MODES = ("online", "exact")


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    """Mini-batch gradient of ``Phi`` split into its adaptation and anticipation terms."""

    total: np.ndarray
    term_adapt: np.ndarray
    term_anticipate: np.ndarray

    @classmethod
    def from_terms(cls, adapt, anticipate):
        adapt = np.asarray(adapt, dtype=float)
        anticipate = np.asarray(anticipate, dtype=float)
        return cls(adapt + anticipate, adapt, anticipate)


class StepResult(NamedTuple):
    u: np.ndarray
    gradient: GradientEstimate
    batch: np.ndarray | None = None


def decision_dim(model: DynamicsModel, population: Population) -> int:
    """Decision length: columns of ``B`` for linear models, the state length otherwise."""
    B = getattr(model, "B", None)
    if B is not None:
        return B.shape[1]
    return population.dim_state


def _as_population(batch) -> Population:
    if isinstance(batch, Population):
        return batch
    items: Sequence[Individual] = list(batch)
    return Population.from_individuals(items)


def anticipation_terms(model: DynamicsModel, u, batch: Population, grad_p,
                       mode: str = "online") -> np.ndarray:
    """Per-sample ``H_i grad_p Phi_i`` for every member of ``batch`` (shape (B, n))."""
    if mode not in SENSITIVITY_MODES:
        raise ValueError(f"unknown sensitivity mode {mode!r}")
    u = np.asarray(u, dtype=float)
    if isinstance(model, LinearDynamics):
        return grad_p @ model.gain()
    if isinstance(model, SoftmaxDynamics):
        H = softmax_sensitivity_matrix(u, model.lambda1, model.lambda2, model.epsilon)
        return grad_p @ H.T
    if isinstance(model, PolarizedDynamics):
        p = batch.p
        if mode == "exact":
            p = steady_state(model, u, batch.d, p_init=batch.p).p_ss
        nrm = rownorm(model.pre_normalized(p, u, batch.d))
        H = polarized_sensitivity_batch(u, p, nrm, model.lam, model.sigma)
        return np.einsum("bij,bj->bi", H, grad_p)
    raise TypeError(f"unsupported model {model!r}")


def composite_gradient(objective, model: DynamicsModel, u, batch,
                       sensitivity_mode: str = "online") -> GradientEstimate:
    """Average of ``grad_u Phi(u, p_i) + H_i grad_p Phi(u, p_i)`` over the batch.

    ``H_i`` is the sensitivity at the sample's current state (``online``) or
    at its steady state under ``u`` (``exact``).  The estimate is the gradient
    of ``Phi`` itself; the update rules apply the ascent/descent sign.
    """
    batch = _as_population(batch)
    if len(batch) == 0:
        raise ValueError("empty mini-batch")
    gu = objective.grad_u(u, batch.p)
    gp = objective.grad_p(u, batch.p)
    ant = anticipation_terms(model, u, batch, gp, sensitivity_mode)
    return GradientEstimate.from_terms(gu.mean(axis=0), ant.mean(axis=0))


def vanilla_gradient(objective, u, batch) -> GradientEstimate:
    batch = _as_population(batch)
    gu = objective.grad_u(u, batch.p).mean(axis=0)
    return GradientEstimate.from_terms(gu, np.zeros_like(gu))


def _apply(u, grad: GradientEstimate, objective, constraint, eta):
    if not eta > 0:
        raise ValueError("step size must be positive")
    direction = grad.total if objective.maximize else -grad.total
    return constraint.project(np.asarray(u, dtype=float) + eta * direction)


def step_composite(u, population: Population, objective, constraint, model: DynamicsModel,
                   eta: float, n_mb: int, rng: np.random.Generator,
                   sensitivity_mode: str = "online") -> StepResult:
    idx = draw_minibatch(population, n_mb, rng)
    grad = composite_gradient(objective, model, u, population.take(idx), sensitivity_mode)
    return StepResult(_apply(u, grad, objective, constraint, eta), grad, idx)


def step_vanilla(u, objective, constraint, eta: float, batch) -> StepResult:
    grad = vanilla_gradient(objective, u, batch)
    return StepResult(_apply(u, grad, objective, constraint, eta), grad)


def sample_unit_sphere(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class DFOState:
    """Decision, current probing direction and the previous query's objective value."""

    q: np.ndarray
    v: np.ndarray
    value_prev: float | None = None

    def query(self, delta: float) -> np.ndarray:
        return self.q + delta * self.v


def two_point_estimate(value_now, value_prev, v, delta):
    return (v.shape[0] / delta) * (value_now - value_prev) * v


def step_dfo(state: DFOState, value_now: float, delta: float, eta: float, constraint,
             rng: np.random.Generator, maximize: bool = True) -> tuple[DFOState, np.ndarray]:
    """One derivative-free update from the objective value observed at ``state.query``.

    The first call only stores the observation.  Returns the next state
    (with a fresh probing direction) and the gradient estimate used.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if state.value_prev is None:
        g = np.zeros_like(state.q)
        q_next = state.q
    else:
        g = two_point_estimate(value_now, state.value_prev, state.v, delta)
        q_next = constraint.project(state.q + eta * (g if maximize else -g))
    v_next = sample_unit_sphere(state.q.shape[0], rng)
    return DFOState(q_next, v_next, float(value_now)), g
