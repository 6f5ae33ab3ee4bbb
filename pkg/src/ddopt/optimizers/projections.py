"""Euclidean projections onto the feasible sets used by the case studies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import FeasibilityError


def project_norm_ball(v, radius: float = 1.0) -> np.ndarray:
    if not radius > 0:
        raise ValueError("radius must be positive")
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n <= radius:
        return v.copy()
    return (radius / n) * v


def _capped_sum(v, theta, qbar):
    return np.clip(v - theta, 0.0, qbar).sum()


def capped_simplex_threshold(v, b: float, qbar: float) -> float:
    """Threshold ``theta`` with ``sum(clip(v - theta, 0, qbar)) == b``.

    The sum is piecewise linear and nonincreasing in ``theta`` with kinks at
    ``v_i`` and ``v_i - qbar``.  Bisection over the sorted kinks brackets the
    root within one linear piece, which is then solved exactly.
    """
    v = np.asarray(v, dtype=float)
    m = v.shape[0]
    if not (b > 0 and b <= m * qbar and qbar > 0):
        raise FeasibilityError(f"infeasible capped simplex: b={b}, qbar={qbar}, m={m}")
    knots = np.unique(np.concatenate([v - qbar, v]))
    # the sum is m * qbar at the first kink and 0 at the last
    lo, hi = 0, knots.shape[0] - 1
    g_lo, g_hi = float(m * qbar), 0.0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        g_mid = _capped_sum(v, knots[mid], qbar)
        if g_mid >= b:
            lo, g_lo = mid, g_mid
        else:
            hi, g_hi = mid, g_mid
    theta = knots[lo] + (g_lo - b) * (knots[hi] - knots[lo]) / (g_lo - g_hi)
    # recompute from the identified active set to avoid interpolation round-off
    shifted = v - theta
    free = (shifted > 0) & (shifted < qbar)
    if free.any():
        capped = shifted >= qbar
        exact = (v[free].sum() + qbar * capped.sum() - b) / free.sum()
        if knots[lo] <= exact <= knots[hi]:
            theta = exact
    return float(theta)


def project_capped_simplex(v, b: float, qbar: float) -> np.ndarray:
    """Projection onto ``{q : sum q = b, 0 <= q_i <= qbar}``."""
    v = np.asarray(v, dtype=float)
    if b == v.shape[0] * qbar and qbar > 0:
        return np.full_like(v, qbar)
    theta = capped_simplex_threshold(v, b, qbar)
    return np.clip(v - theta, 0.0, qbar)


@dataclass(frozen=True)
class NormBall:
    radius: float = 1.0

    kind = "norm_ball"

    def __post_init__(self):
        if not self.radius > 0:
            raise FeasibilityError("radius must be positive")

    def project(self, v):
        return project_norm_ball(v, self.radius)

    def initial(self, n: int) -> np.ndarray:
        return self.project(np.zeros(n))


@dataclass(frozen=True)
class CappedSimplex:
    b: float
    qbar: float

    kind = "capped_simplex"

    def __post_init__(self):
        if not (self.b > 0 and self.qbar > 0):
            raise FeasibilityError("b and qbar must be positive")

    def project(self, v):
        return project_capped_simplex(v, self.b, self.qbar)

    def initial(self, n: int) -> np.ndarray:
        return self.project(np.zeros(n))


@dataclass(frozen=True)
class Unconstrained:
    kind = "unconstrained"

    def project(self, v):
        return np.array(v, dtype=float)

    def initial(self, n: int) -> np.ndarray:
        return np.zeros(n)


Constraint = NormBall | CappedSimplex | Unconstrained
