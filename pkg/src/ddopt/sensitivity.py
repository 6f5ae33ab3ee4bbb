"""Steady-state sensitivities ``grad_u h`` (rows: decision coordinates,
columns: state coordinates) and a finite-difference oracle for them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    DynamicsModel,
    LinearDynamics,
    PolarizedDynamics,
    SoftmaxDynamics,
    steady_state,
)
from .errors import DegenerateStateError, SingularityError

_SOLUTION_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    H: np.ndarray
    source: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.H)):
            raise SingularityError("sensitivity has non-finite entries")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.H, dtype=dtype)

    @property
    def shape(self):
        return self.H.shape


def _solve(K: np.ndarray, R: np.ndarray, what: str) -> np.ndarray:
    try:
        X = np.linalg.solve(K, R)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"{what} is singular") from exc
    scale = max(1.0, float(np.max(np.abs(R))))
    if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > _SOLUTION_LIMIT * scale:
        raise SingularityError(f"{what} is numerically singular")
    return X


def sensitivity_implicit(model: DynamicsModel, u, d, p_ss) -> SensitivityMatrix:
    """Implicit-function sensitivity ``-grad_u f [grad_p f - I]^{-1}`` at a fixed point."""
    jp, ju = model.jacobians(np.asarray(p_ss, float), np.asarray(u, float), np.asarray(d, float))
    K = jp - np.eye(jp.shape[0])
    # H (jp^T - I) = -ju^T  <=>  (jp - I) H^T = -ju
    H = _solve(K, -ju, "[grad_p f - I]").T
    return SensitivityMatrix(H, "implicit")


def polarized_sensitivity_batch(q, p, p_tilde_norm, lam, sigma) -> np.ndarray:
    """Stack of polarized sensitivities for positions ``p`` of shape (B, m)."""
    q = np.asarray(q, dtype=float)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    nrm = np.broadcast_to(np.asarray(p_tilde_norm, dtype=float), (p.shape[0],))
    if np.any(nrm <= 1e-12):
        raise DegenerateStateError("pre-normalized norm must exceed 1e-12")
    b, m = p.shape
    eye = np.eye(m)
    proj = eye - p[:, :, None] * p[:, None, :]
    left = (p @ q)[:, None, None] * eye + p[:, :, None] * q[None, None, :]
    M = lam * eye + sigma * np.outer(q, q)
    K = M[None] @ proj - nrm[:, None, None] * eye
    R = -sigma * left @ proj
    # H = R K^{-1}  <=>  K^T H^T = R^T
    Ht = _solve(np.swapaxes(K, 1, 2), np.swapaxes(R, 1, 2), "polarized sensitivity bracket")
    return np.swapaxes(Ht, 1, 2)


def sensitivity_polarized(q, p, p_tilde_norm, lam, sigma) -> SensitivityMatrix:
    """Polarized sensitivity evaluated at position ``p`` (unit norm).

    At a steady state this is the exact sensitivity; at a transient position
    it is the online approximation used by the composite algorithm.
    """
    p = np.asarray(p, dtype=float)
    if abs(np.linalg.norm(p) - 1.0) > 1e-9:
        raise ValueError("p must have unit norm")
    H = polarized_sensitivity_batch(q, p[None], p_tilde_norm, lam, sigma)[0]
    return SensitivityMatrix(H, "analytic")


def softmax_sensitivity_matrix(q, lambda1, lambda2, epsilon) -> np.ndarray:
    z = np.exp(-epsilon * (np.asarray(q, dtype=float) - np.min(q)))
    s = z.sum()
    return -(epsilon * lambda2 / (1.0 - lambda1)) * (s * np.diag(z) - np.outer(z, z)) / s**2


def sensitivity_softmax(q, lambda1, lambda2, epsilon) -> SensitivityMatrix:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return SensitivityMatrix(softmax_sensitivity_matrix(q, lambda1, lambda2, epsilon), "analytic")


def sensitivity_exact(model: DynamicsModel, u, d, p_ss=None) -> SensitivityMatrix:
    """Exact sensitivity using the closed form available for each variant."""
    if isinstance(model, LinearDynamics):
        return SensitivityMatrix(model.gain().T, "analytic")
    if isinstance(model, SoftmaxDynamics):
        return sensitivity_softmax(u, model.lambda1, model.lambda2, model.epsilon)
    if isinstance(model, PolarizedDynamics):
        if p_ss is None:
            p_ss = steady_state(model, u, d).p_ss
        nrm = np.linalg.norm(model.pre_normalized(p_ss, np.asarray(u, float), d))
        return sensitivity_polarized(u, p_ss, nrm, model.lam, model.sigma)
    raise TypeError(f"unsupported model {model!r}")


def sensitivity_fd_oracle(model: DynamicsModel, u, d, h_step: float = 1e-5,
                          tol: float = 1e-12, max_iter: int = 100_000) -> SensitivityMatrix:
    """Central differences of the steady-state map, column by decision coordinate.

    Steady states are always obtained by fixed-point iteration here, so the
    oracle never shares a code path with the closed forms it checks.
    """
    if not h_step > 0:
        raise ValueError("h_step must be positive")
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    rows = []
    for j in range(u.shape[0]):
        e = np.zeros_like(u)
        e[j] = h_step
        plus = steady_state(model, u + e, d, tol=tol, max_iter=max_iter, method="iterate").p_ss
        minus = steady_state(model, u - e, d, tol=tol, max_iter=max_iter, method="iterate").p_ss
        rows.append((plus - minus) / (2.0 * h_step))
    return SensitivityMatrix(np.array(rows), "finite_difference")
