"""Populations of individuals, seeded samplers and mini-batch selection.

A :class:`Population` stores its individuals as three stacked arrays
(initial states, exogenous inputs, current states) so the dynamics can be
applied to every individual at once.  Arrays are made read-only; evolving a
population returns a new one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import SizeError


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Keys are typically ``(trial, stream)``; the same key tuple always yields
    the same stream regardless of what other streams were consumed.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Individual:
    p0: np.ndarray
    d: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p0", _frozen(self.p0))
        object.__setattr__(self, "d", _frozen(self.d))
        object.__setattr__(self, "p", _frozen(self.p))
        if self.p0.shape != self.p.shape:
            raise SizeError("p0 and p must have the same dimension")


@dataclass(frozen=True, eq=False)
class Population:
    """Immutable collection of individuals sharing state dimension ``m``
    and exogenous dimension ``r``."""

    p0: np.ndarray
    d: np.ndarray
    p: np.ndarray
    seed: int = 0
    reference: np.ndarray | None = field(default=None)

    def __post_init__(self):
        p0 = np.atleast_2d(np.asarray(self.p0, dtype=float))
        d = np.atleast_2d(np.asarray(self.d, dtype=float))
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if p0.shape != p.shape:
            raise SizeError(f"p0 shape {p0.shape} differs from p shape {p.shape}")
        if d.shape[0] != p0.shape[0]:
            raise SizeError("every individual needs exactly one exogenous input")
        object.__setattr__(self, "p0", _frozen(p0))
        object.__setattr__(self, "d", _frozen(d))
        object.__setattr__(self, "p", _frozen(p))
        if self.reference is not None:
            object.__setattr__(self, "reference", _frozen(self.reference))

    @classmethod
    def from_individuals(cls, individuals: Iterable[Individual], seed: int = 0) -> "Population":
        items = list(individuals)
        if not items:
            raise SizeError("a population needs at least one individual")
        return cls(
            p0=np.stack([i.p0 for i in items]),
            d=np.stack([i.d for i in items]),
            p=np.stack([i.p for i in items]),
            seed=seed,
        )

    @property
    def dim_state(self) -> int:
        return self.p0.shape[1]

    @property
    def dim_exo(self) -> int:
        return self.d.shape[1]

    @property
    def individuals(self) -> list[Individual]:
        return [self[i] for i in range(len(self))]

    def __len__(self) -> int:
        return self.p0.shape[0]

    def __getitem__(self, i: int) -> Individual:
        return Individual(self.p0[i], self.d[i], self.p[i])

    def with_state(self, p: np.ndarray) -> "Population":
        return Population(self.p0, self.d, p, seed=self.seed, reference=self.reference)

    def take(self, indices: Sequence[int]) -> "Population":
        idx = np.asarray(indices, dtype=int)
        return Population(self.p0[idx], self.d[idx], self.p[idx], seed=self.seed,
                          reference=self.reference)

    def to_csv(self) -> str:
        """Flat CSV, one row per individual: p0 components then d components."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"p0_{j}" for j in range(self.dim_state)]
                        + [f"d_{j}" for j in range(self.dim_exo)])
        for p0, d in zip(self.p0, self.d):
            writer.writerow([repr(float(x)) for x in p0] + [repr(float(x)) for x in d])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> "Population":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        m = sum(1 for h in header if h.startswith("p0_"))
        p0 = body[:, :m]
        return cls(p0=p0, d=body[:, m:], p=p0, seed=seed)


def sample_hemisphere(dim: int, count: int, seed: int) -> Population:
    """Unit vectors uniform on the hemisphere around a seeded reference.

    The reference direction is the first draw of the stream and is kept on
    the returned population.  Each individual gets ``d = p0`` and ``p = p0``.
    """
    if dim < 2 or count < 1:
        raise SizeError("need dim >= 2 and count >= 1")
    rng = make_rng(seed, 0)
    ref = rng.standard_normal(dim)
    ref /= np.linalg.norm(ref)
    x = rng.standard_normal((count, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    proj = x @ ref
    flip = proj < 0
    # reflection across the plane orthogonal to ref keeps the law uniform
    x[flip] -= 2.0 * proj[flip, None] * ref
    return Population(p0=x, d=x, p=x, seed=seed, reference=ref)


def sample_simplex(dim: int, count: int, seed: int) -> Population:
    """Points uniform on the probability simplex (flat Dirichlet); ``d = p0``."""
    if dim < 1 or count < 1:
        raise SizeError("need dim >= 1 and count >= 1")
    rng = make_rng(seed, 0)
    x = rng.dirichlet(np.ones(dim), size=count)
    return Population(p0=x, d=x, p=x, seed=seed)


def sample_gaussian(dim_state: int, dim_exo: int, count: int, seed: int,
                    scale: float = 1.0) -> Population:
    """Independent Gaussian initial states and exogenous inputs (linear test models)."""
    if dim_state < 1 or dim_exo < 1 or count < 1:
        raise SizeError("dimensions and count must be positive")
    rng = make_rng(seed, 0)
    p0 = scale * rng.standard_normal((count, dim_state))
    d = scale * rng.standard_normal((count, dim_exo))
    return Population(p0=p0, d=d, p=p0, seed=seed)


def draw_minibatch(pop: Population | int, n_mb: int, rng: np.random.Generator) -> np.ndarray:
    """``n_mb`` distinct indices drawn uniformly without replacement, sorted."""
    size = pop if isinstance(pop, (int, np.integer)) else len(pop)
    if n_mb < 1 or n_mb > size:
        raise SizeError(f"mini-batch size {n_mb} not in [1, {size}]")
    return np.sort(rng.choice(size, size=n_mb, replace=False))
