"""Per-sample objectives ``Phi(u, p)`` with their partial gradients.

All methods accept a single state ``p`` of shape (m,) or a stack (B, m)
and return matching leading shapes.  ``maximize`` tells the update rules
which direction to move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Affinity:
    """Affinity ``p.q`` between a position and the decision (maximized)."""

    maximize = True
    kind = "affinity"

    def value(self, u, p):
        return np.asarray(p) @ np.asarray(u)

    def grad_u(self, u, p):
        return np.array(p, dtype=float)

    def grad_p(self, u, p):
        return np.broadcast_to(np.asarray(u, dtype=float), np.shape(p)).copy()


@dataclass(frozen=True)
class GainEntropy:
    """Expected gain plus a negative-entropy term: ``p.q + rho sum p log p`` (maximized)."""

    rho: float

    maximize = True
    kind = "gain_entropy"

    def value(self, u, p):
        p = np.asarray(p, dtype=float)
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        return p @ np.asarray(u) + self.rho * plogp.sum(axis=-1)

    def grad_u(self, u, p):
        return np.array(p, dtype=float)

    def grad_p(self, u, p):
        return np.asarray(u, dtype=float) + self.rho * (1.0 + np.log(np.asarray(p, dtype=float)))


@dataclass(frozen=True, eq=False)
class QuadraticTest:
    """``0.5 ||p - targets||^2 + 0.5 weight ||u||^2`` (minimized); used for rate checks."""

    targets: np.ndarray
    weight: float = 1.0

    maximize = False
    kind = "quadratic"

    def value(self, u, p):
        r = np.asarray(p) - self.targets
        return 0.5 * np.sum(r * r, axis=-1) + 0.5 * self.weight * float(np.dot(u, u))

    def grad_u(self, u, p):
        lead = np.shape(p)[:-1]
        return np.broadcast_to(self.weight * np.asarray(u, dtype=float),
                               lead + np.shape(u)).copy()

    def grad_p(self, u, p):
        return np.asarray(p, dtype=float) - self.targets


Objective = Affinity | GainEntropy | QuadraticTest
