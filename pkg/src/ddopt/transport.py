"""Exact discrete Wasserstein-1 distances and population diagnostics.

``w1_discrete_exact`` solves the transportation problem with the
transportation simplex (northwest-corner start, u-v duals).  Entering cells
follow the most negative reduced cost and fall back to Bland's rule after
a degenerate pivot, which rules out cycling.
``w1_categorical_1d`` is the closed form for distributions over ordered
categories with ground cost ``|i - j|``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .distributions import Population
from .dynamics import DynamicsModel, steady_state
from .errors import DegenerateStateError, InsufficientDataError, MassError, SizeError

MAX_ATOMS = 500
GROUND_METRICS = ("euclidean", "weighted_P", "index_abs")


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float)
        if support.ndim == 1:
            support = support[:, None]
        mass = np.asarray(self.mass, dtype=float).ravel()
        if support.shape[0] != mass.shape[0]:
            raise SizeError("support and mass lengths differ")
        if not np.all(np.isfinite(mass)):
            raise MassError("masses must be finite")
        if np.any(mass < 0):
            raise MassError("masses must be nonnegative")
        if abs(mass.sum() - 1.0) > 1e-10:
            raise MassError(f"masses sum to {mass.sum()!r}, expected 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        points = np.asarray(points, dtype=float)
        return cls(points, np.full(points.shape[0], 1.0 / points.shape[0]))

    @classmethod
    def categorical(cls, p) -> "DiscreteMeasure":
        p = np.asarray(p, dtype=float)
        return cls(np.arange(p.shape[0], dtype=float), p)

    def __len__(self):
        return self.mass.shape[0]


@dataclass(frozen=True, eq=False)
class TransportPlan:
    plan: np.ndarray
    cost: float


def ground_cost(x, y, metric: str = "euclidean", P=None) -> np.ndarray:
    """Pairwise ground-cost matrix between two point sets (rows of ``x`` and ``y``)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    diff = x[:, None, :] - y[None, :, :]
    if metric == "euclidean":
        return np.sqrt(np.sum(diff * diff, axis=-1))
    if metric == "weighted_P":
        if P is None:
            raise ValueError("weighted_P cost needs the matrix P")
        L = np.linalg.cholesky(np.asarray(P, dtype=float))
        w = diff @ L
        return np.sqrt(np.sum(w * w, axis=-1))
    if metric == "index_abs":
        return np.sum(np.abs(diff), axis=-1)
    raise ValueError(f"unknown ground metric {metric!r}")


def weighted_norm(x, P=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if P is None:
        return np.sqrt(np.sum(x * x, axis=-1))
    return np.sqrt(np.einsum("...i,ij,...j->...", x, np.asarray(P, dtype=float), x))


def w1_categorical_1d(p, q) -> float:
    """W1 between two distributions over ordered categories, cost ``|i - j|``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise SizeError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return float(np.sum(np.abs(np.cumsum(p - q)[:-1])))


def _northwest_corner(a, b):
    m, n = a.shape[0], b.shape[0]
    flow = np.zeros((m, n))
    basis = []
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while i < m and j < n:
        x = min(ra[i], rb[j])
        flow[i, j] = x
        basis.append((i, j))
        ra[i] -= x
        rb[j] -= x
        if i == m - 1 and j == n - 1:
            break
        # exactly one index advances per cell, so the m + n - 1 cells form a
        # spanning tree even when ties leave zero (degenerate) basic flows
        if i == m - 1:
            j += 1
        elif j == n - 1 or ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def _tree(basis, m, n):
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    return adj


def _duals(C, basis, m, n):
    adj = _tree(basis, m, n)
    pot = np.full(m + n, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if np.isnan(pot[nb]):
                if node < m:
                    pot[nb] = C[node, nb - m] - pot[node]
                else:
                    pot[nb] = C[nb, node - m] - pot[node]
                queue.append(nb)
    return pot[:m], pot[m:], adj


def _tree_path(adj, start, goal):
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def transportation_simplex(a, b, C, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal flow matrix of the balanced transportation problem."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    m, n = C.shape
    flow, basis = _northwest_corner(a, b)
    in_basis = np.zeros((m, n), dtype=bool)
    for cell in basis:
        in_basis[cell] = True
    eps = 1e-12 * max(1.0, float(np.max(np.abs(C))))
    bland = False
    for _ in range(max_iter):
        u, v, adj = _duals(C, basis, m, n)
        reduced = C - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        flat = reduced.ravel()
        if bland:
            # Bland's rule: lowest-index improving cell enters
            candidates = np.flatnonzero(flat < -eps)
            if candidates.size == 0:
                return flow
            enter = int(candidates[0])
        else:
            enter = int(np.argmin(flat))
            if flat[enter] >= -eps:
                return flow
        ei, ej = divmod(enter, n)
        path = _tree_path(adj, m + ej, ei)
        # path runs col ej -> ... -> row ei; consecutive nodes give the cycle's cells
        cells = []
        for s, t in zip(path[:-1], path[1:]):
            cells.append((t, s - m) if s >= m else (s, t - m))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min((c for c in minus if flow[c] == theta), key=lambda c: c[0] * n + c[1])
        # steepest reduced cost normally; Bland's rule guards degenerate stretches
        bland = theta == 0.0
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ei, ej] += theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        in_basis[leaving] = False
        basis.append((ei, ej))
        in_basis[ei, ej] = True
    raise RuntimeError("transportation simplex exceeded its iteration cap")


def w1_discrete_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: str = "euclidean",
                      P=None) -> TransportPlan:
    """Exact optimal transport plan and W1 cost between two discrete measures."""
    if len(mu) > MAX_ATOMS or len(nu) > MAX_ATOMS:
        raise SizeError(f"supports limited to {MAX_ATOMS} atoms")
    if cost == "index_abs" and (mu.support.shape[1] != 1 or nu.support.shape[1] != 1):
        raise SizeError("index_abs cost needs one-dimensional supports")
    if mu.support.shape[1] != nu.support.shape[1]:
        raise SizeError("supports live in different dimensions")
    C = ground_cost(mu.support, nu.support, cost, P)
    rows = np.flatnonzero(mu.mass > 0)
    cols = np.flatnonzero(nu.mass > 0)
    a = mu.mass[rows]
    b = nu.mass[cols]
    b = b * (a.sum() / b.sum())
    sub = transportation_simplex(a, b, C[np.ix_(rows, cols)])
    plan = np.zeros((len(mu), len(nu)))
    plan[np.ix_(rows, cols)] = sub
    return TransportPlan(plan, float(np.sum(plan * C)))


def w1_uniform_empirical(x, y, cost: str = "euclidean", P=None) -> float:
    """W1 between two uniform empirical measures with equally many atoms.

    With equal uniform masses an optimal plan can be taken to be a
    permutation, so the problem reduces to a linear assignment.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise SizeError("assignment form needs equally many atoms")
    C = ground_cost(x, y, cost, P)
    r, c = linear_sum_assignment(C)
    return float(C[r, c].mean())


def vk_estimate(pop: Population, model: DynamicsModel, u, P=None, p_ss=None) -> float:
    """Population mean of ``||p_i - h(u, d_i)||_P`` (identity metric when ``P`` is None)."""
    if p_ss is None:
        p_ss = steady_state(model, u, pop.d).p_ss
    return float(np.mean(weighted_norm(pop.p - p_ss, P)))


@dataclass(frozen=True, eq=False)
class Envelope:
    mean: np.ndarray
    low: np.ndarray
    high: np.ndarray


def envelope(traces: Sequence[np.ndarray]) -> Envelope:
    stack = np.vstack([np.asarray(t, dtype=float) for t in traces])
    return Envelope(stack.mean(axis=0), stack.min(axis=0), stack.max(axis=0))


CONVERGENCE_FIELDS = ("grad_sq", "opt_gap_rel", "dist_to_ustar", "w1_to_ss")


def convergence_measures(records) -> dict[str, Envelope]:
    """Per-iteration mean and min/max envelope across trials.

    ``grad_sq`` uses the exact reduced gradient when the records carry it,
    otherwise the squared norm of the mini-batch estimate.
    """
    records = list(records)
    if not records:
        raise InsufficientDataError("no run records given")
    lengths = {len(r.iters) for r in records}
    if len(lengths) != 1:
        raise SizeError("records must share the same horizon")
    out = {}
    out["grad_sq"] = envelope([r.grad_sq for r in records])
    for name in CONVERGENCE_FIELDS[1:]:
        out[name] = envelope([getattr(r, name) for r in records])
    return out


def angles_degrees(states, q) -> np.ndarray:
    p = np.atleast_2d(np.asarray(states, dtype=float))
    q = np.asarray(q, dtype=float)
    pn = np.linalg.norm(p, axis=1)
    qn = np.linalg.norm(q)
    if qn == 0 or np.any(pn == 0):
        raise DegenerateStateError("angle with a zero vector is undefined")
    cos = np.clip((p @ q) / (pn * qn), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def angle_histogram(pop, q, n_bins: int = 18) -> tuple[np.ndarray, np.ndarray]:
    """Counts of the angles between each state and ``q`` over ``[0, 180]`` degrees."""
    states = pop.p if isinstance(pop, Population) else pop
    ang = angles_degrees(states, q)
    return np.histogram(ang, bins=n_bins, range=(0.0, 180.0))


def angle_mass_fraction(states, q, low: float, high: float) -> float:
    ang = angles_degrees(states, q)
    return float(np.mean((ang >= low) & (ang <= high)))
