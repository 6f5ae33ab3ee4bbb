"""Per-individual dynamics ``p_next = f(p, u, d)``, steady states and
contraction certificates.

Three model variants are supported:

* :class:`LinearDynamics` -- ``A p + B u + E d``
* :class:`PolarizedDynamics` -- biased assimilation on the unit sphere,
  the exogenous input is the initial position
* :class:`SoftmaxDynamics` -- choice distributions on the simplex,
  the exogenous input is the initial distribution

``step`` is vectorized: ``p`` and ``d`` may carry a leading population axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .distributions import Population
from .errors import (
    DegenerateStateError,
    NonConvergenceError,
    SizeError,
    StabilityError,
    UnsupportedCertificateError,
)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
DEGENERATE_NORM = 1e-12
MAX_LYAPUNOV_DIM = 50
# plain fixed-point steps continue until the residual falls below this,
# after which Newton steps take over (polarized model only)
NEWTON_SWITCH = 1e-3
NEWTON_MAX_STEPS = 20


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def rownorm(x) -> np.ndarray:
    x = np.asarray(x)
    return np.sqrt(np.sum(x * x, axis=-1))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray

    kind = "linear"

    def __post_init__(self):
        for name in ("A", "B", "E"):
            a = np.atleast_2d(np.array(getattr(self, name), dtype=float))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        m = self.A.shape[0]
        if self.A.shape != (m, m) or self.B.shape[0] != m or self.E.shape[0] != m:
            raise SizeError("A must be m x m and B, E must have m rows")

    @property
    def dim_state(self) -> int:
        return self.A.shape[0]

    @property
    def dim_decision(self) -> int:
        return self.B.shape[1]

    def validate(self) -> None:
        rho = spectral_radius(self.A)
        if not rho < 1.0:
            raise StabilityError(f"A is not Schur stable (spectral radius {rho:.6g})")

    def step(self, p, u, d):
        return p @ self.A.T + self.B @ u + d @ self.E.T

    def jacobians(self, p, u, d):
        return self.A.copy(), self.B.copy()

    def gain(self) -> np.ndarray:
        """Zero-frequency gain ``(I - A)^{-1} B`` (m x n)."""
        return np.linalg.solve(np.eye(self.dim_state) - self.A, self.B)

    def closed_form(self, u, d):
        rhs = self.B @ u + np.asarray(d) @ self.E.T
        return np.linalg.solve(np.eye(self.dim_state) - self.A, np.atleast_2d(rhs).T).T.reshape(
            np.shape(rhs))


@dataclass(frozen=True)
class PolarizedDynamics:
    lam: float
    sigma: float

    kind = "polarized"

    def validate(self) -> None:
        if not 0.0 <= self.lam < 1.0:
            raise StabilityError(f"lambda must lie in [0, 1), got {self.lam}")
        if not self.sigma > 0.0:
            raise StabilityError(f"sigma must be positive, got {self.sigma}")

    def pre_normalized(self, p, q, p0):
        """The unnormalized update ``lam p + (1 - lam) p0 + sigma (p.q) q``."""
        p = np.asarray(p, dtype=float)
        return self.lam * p + (1.0 - self.lam) * np.asarray(p0) + self.sigma * (p @ q)[..., None] * q

    def step(self, p, q, p0):
        norms = rownorm(p)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            bad = int(np.argmax(np.abs(np.atleast_1d(norms) - 1.0)))
            raise SizeError(f"polarized state must have unit norm (individual {bad})")
        pt = self.pre_normalized(p, q, p0)
        n = rownorm(pt)[..., None]
        if np.any(n < DEGENERATE_NORM):
            bad = int(np.argmin(np.atleast_1d(n.ravel())))
            raise DegenerateStateError("pre-normalized state vanished; normalization undefined",
                                       index=bad)
        return pt / n

    def jacobians(self, p, q, p0):
        m = p.shape[0]
        pt = self.pre_normalized(p, q, p0)
        n = np.linalg.norm(pt)
        if n < DEGENERATE_NORM:
            raise DegenerateStateError("pre-normalized state vanished")
        pn = pt / n
        proj = (np.eye(m) - np.outer(pn, pn)) / n
        jp = proj @ (self.lam * np.eye(m) + self.sigma * np.outer(q, q))
        ju = proj @ (self.sigma * (np.outer(q, p) + (p @ q) * np.eye(m)))
        return jp, ju


@dataclass(frozen=True)
class SoftmaxDynamics:
    lambda1: float
    lambda2: float
    epsilon: float

    kind = "softmax"

    def validate(self) -> None:
        if not (0.0 <= self.lambda1 < 1.0 and 0.0 <= self.lambda2 < 1.0):
            raise StabilityError("lambda1 and lambda2 must lie in [0, 1)")
        if self.lambda1 + self.lambda2 > 1.0:
            raise StabilityError("lambda1 + lambda2 must not exceed 1")
        if not self.epsilon > 0.0:
            raise StabilityError("epsilon must be positive")

    def choice(self, q):
        return softmax(-self.epsilon * np.asarray(q, dtype=float))

    def step(self, p, q, p0):
        rest = 1.0 - self.lambda1 - self.lambda2
        return self.lambda1 * np.asarray(p) + self.lambda2 * self.choice(q) + rest * np.asarray(p0)

    def jacobians(self, p, q, p0):
        m = np.shape(p)[0]
        s = self.choice(q)
        ju = -self.lambda2 * self.epsilon * (np.diag(s) - np.outer(s, s))
        return self.lambda1 * np.eye(m), ju

    def closed_form(self, q, p0):
        scale = 1.0 - self.lambda1
        return (self.lambda2 / scale) * self.choice(q) + \
            ((1.0 - self.lambda1 - self.lambda2) / scale) * np.asarray(p0)


DynamicsModel = Union[LinearDynamics, PolarizedDynamics, SoftmaxDynamics]


class SteadyState(NamedTuple):
    p_ss: np.ndarray
    iters: int


@dataclass(frozen=True, eq=False)
class ContractionCertificate:
    P: np.ndarray
    Lfp: float
    Lhu: float
    rho1: float
    rho2: float

    @classmethod
    def from_constants(cls, P, Lfp, Lhu):
        lmax = float(np.max(np.linalg.eigvalsh(P)))
        rho1 = (1.0 + Lfp**2) / 2.0
        rho2 = (1.0 + Lfp**2) / (1.0 - Lfp**2) * (Lfp * Lhu) ** 2 * lmax
        return cls(P=np.array(P, dtype=float), Lfp=float(Lfp), Lhu=float(Lhu),
                   rho1=float(rho1), rho2=float(rho2))

    @property
    def lambda_max(self) -> float:
        return float(np.max(np.linalg.eigvalsh(self.P)))


def step(model: DynamicsModel, p, u, d):
    """One application of the dynamics map."""
    return model.step(np.asarray(p, dtype=float), np.asarray(u, dtype=float),
                      np.asarray(d, dtype=float))


def _iterate(model, u, d, p, tol, max_iter):
    for it in range(1, max_iter + 1):
        nxt = model.step(p, u, d)
        delta = float(np.max(rownorm(nxt - p)))
        p = nxt
        if delta <= tol:
            return p, it
    raise NonConvergenceError(f"steady state not reached in {max_iter} iterations", delta)


def _polarized_newton_step(model, p, q, d):
    """Newton update for ``g(p) - p = 0`` with ``g`` the normalized map, batched.

    With ``n = g(p)`` and ``nu = |p_tilde|`` the Jacobian of ``g`` is
    ``(I - n n^T)(lam I + sigma q q^T) / nu``, so ``J - I`` is a multiple of
    the identity plus a rank-two term ``U V^T`` with ``U = [n, q]``; the
    Woodbury identity reduces each solve to a 2x2 system.
    """
    pt = model.pre_normalized(p, q, d)
    nu = rownorm(pt)
    n = pt / nu[:, None]
    r = n - p
    alpha = model.lam / nu - 1.0
    if np.any(np.abs(alpha) < 1e-8):
        raise np.linalg.LinAlgError("identity part of the Newton system vanished")
    nq = n @ q
    qq = q @ q
    # columns of V: v1 = -(lam n + sigma (n.q) q) / nu, v2 = sigma q / nu
    v1_n = -model.lam / nu          # coefficient of n in v1
    v1_q = -model.sigma * nq / nu   # coefficient of q in v1
    v2_q = model.sigma / nu         # coefficient of q in v2
    # S = alpha I + V^T U, entries V_i . U_j with U = [n, q]
    s11 = alpha + v1_n + v1_q * nq
    s12 = v1_n * nq + v1_q * qq
    s21 = v2_q * nq
    s22 = alpha + v2_q * qq
    rn = np.einsum("ij,ij->i", r, n)
    rq = r @ q
    w1 = v1_n * rn + v1_q * rq
    w2 = v2_q * rq
    det = s11 * s22 - s12 * s21
    if np.any(np.abs(det) < 1e-14):
        raise np.linalg.LinAlgError("Newton system is singular")
    y1 = (s22 * w1 - s12 * w2) / det
    y2 = (s11 * w2 - s21 * w1) / det
    x = (r - y1[:, None] * n - y2[:, None] * q[None, :]) / alpha[:, None]
    # x solves (J - I) x = r, so Newton moves p by -x
    nxt = p - x
    return nxt / rownorm(nxt)[:, None]


def _polarized_fixed_point(model, q, d, p, tol, max_iter):
    """Fixed-point iteration switching to safeguarded Newton steps near the solution.

    Every accepted Newton iterate is renormalized onto the sphere, and a step
    that fails to shrink the residual is discarded in favour of plain
    iteration, so the result is always a point where ``|f(p) - p| <= tol``.
    """
    batched = p.ndim == 2
    p = np.atleast_2d(p)
    d = np.broadcast_to(d, p.shape)
    iters = 0
    newton_left = NEWTON_MAX_STEPS
    while True:
        nxt = model.step(p, q, d)
        iters += 1
        res = float(np.max(rownorm(nxt - p)))
        if res <= tol:
            return (nxt if batched else nxt[0]), iters
        if iters >= max_iter:
            raise NonConvergenceError(f"steady state not reached in {max_iter} iterations", res)
        if res > NEWTON_SWITCH or newton_left == 0:
            p = nxt
            continue
        newton_left -= 1
        try:
            cand = _polarized_newton_step(model, p, q, d)
        except np.linalg.LinAlgError:
            newton_left = 0
            p = nxt
            continue
        cand_res = float(np.max(rownorm(model.step(cand, q, d) - cand))) \
            if np.all(np.isfinite(cand)) else np.inf
        iters += 1
        if cand_res < res:
            p = cand
        else:
            newton_left = 0
            p = nxt


def steady_state(model: DynamicsModel, u, d, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER, method: str = "auto",
                 p_init=None) -> SteadyState:
    """Fixed point of ``p -> f(p, u, d)``.

    ``method="auto"`` uses the closed form for linear and softmax models and
    fixed-point iteration accelerated by Newton steps for the polarized
    model; ``method="iterate"`` always runs plain fixed-point iteration
    (starting from ``p_init``, or ``d`` for models whose exogenous input
    lives in state space, or zero).  ``d`` may be a stack of exogenous
    inputs, in which case a stack of steady states is returned.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    if method == "auto" and isinstance(model, LinearDynamics):
        return SteadyState(model.closed_form(u, d), 0)
    if method == "auto" and isinstance(model, SoftmaxDynamics):
        return SteadyState(model.closed_form(u, d), 0)
    if method not in ("auto", "iterate"):
        raise ValueError(f"unknown steady-state method {method!r}")
    if p_init is not None:
        p = np.asarray(p_init, dtype=float)
    elif isinstance(model, LinearDynamics):
        p = np.zeros(d.shape[:-1] + (model.dim_state,))
    else:
        p = d.copy()
    if method == "auto" and isinstance(model, PolarizedDynamics):
        p_ss, iters = _polarized_fixed_point(model, u, d, p, tol, max_iter)
    else:
        p_ss, iters = _iterate(model, u, d, p, tol, max_iter)
    return SteadyState(p_ss, iters)


def evolve_population(model: DynamicsModel, pop: Population, u) -> Population:
    """Apply one step of the dynamics to every individual, preserving order."""
    try:
        p = model.step(pop.p, np.asarray(u, dtype=float), pop.d)
    except DegenerateStateError as exc:
        raise DegenerateStateError(f"individual {exc.index}: {exc}", index=exc.index) from exc
    return pop.with_state(p)


def lyapunov_solve(A, Q) -> np.ndarray:
    """Solve ``A^T P A - P + Q = 0`` through the Kronecker-vectorized system."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    m = A.shape[0]
    if m > MAX_LYAPUNOV_DIM:
        raise SizeError(f"Lyapunov solve limited to m <= {MAX_LYAPUNOV_DIM}")
    if A.shape != (m, m) or Q.shape != (m, m):
        raise SizeError("A and Q must be square with equal size")
    rho = spectral_radius(A)
    if not rho < 1.0:
        raise StabilityError(f"A is not Schur stable (spectral radius {rho:.6g})")
    if not np.allclose(Q, Q.T, atol=1e-12 * max(1.0, np.abs(Q).max())) or \
            np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) <= 0:
        raise ValueError("Q must be symmetric positive definite")
    # column-major vec: vec(A^T P A) = (A^T kron A^T) vec(P)
    K = np.eye(m * m) - np.kron(A.T, A.T)
    vec_p = np.linalg.solve(K, Q.reshape(-1, order="F"))
    P = vec_p.reshape((m, m), order="F")
    return (P + P.T) / 2.0


def contraction_certificate(model: DynamicsModel, Q=None, dim: int = 1) -> ContractionCertificate:
    """Certificate ``(P, Lfp, Lhu, rho1, rho2)``; ``Q`` defaults to the identity.

    For the softmax variant the metric is the identity of size ``dim``.
    """
    if isinstance(model, LinearDynamics):
        model.validate()
        m = model.dim_state
        Q = np.eye(m) if Q is None else np.asarray(Q, dtype=float)
        P = lyapunov_solve(model.A, Q)
        eig_p = np.linalg.eigvalsh(P)
        lmin_q = float(np.min(np.linalg.eigvalsh(Q)))
        Lfp = float(np.sqrt(1.0 - lmin_q / eig_p[-1]))
        Lfu = float(np.linalg.norm(model.B, 2))
        Lhu = Lfu * np.sqrt(eig_p[-1] / eig_p[0]) / (1.0 - Lfp)
        return ContractionCertificate.from_constants(P, Lfp, Lhu)
    if isinstance(model, SoftmaxDynamics):
        model.validate()
        # the softmax Jacobian has spectral norm at most 1/2
        Lfu = model.lambda2 * model.epsilon / 2.0
        Lhu = Lfu / (1.0 - model.lambda1)
        return ContractionCertificate.from_constants(np.eye(dim), model.lambda1, Lhu)
    raise UnsupportedCertificateError(
        f"no closed-form contraction certificate for the {model.kind} variant")
