"""Self-checks run by ``ddopt check``: every suite compares a library routine
against an independent oracle on seeded random inputs.

A suite may be handed ``fault=True`` to corrupt its own computation; the
command-line test hook uses this to confirm that failures are reported.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .distributions import make_rng, sample_gaussian, sample_hemisphere
from .dynamics import (
    LinearDynamics,
    PolarizedDynamics,
    SoftmaxDynamics,
    contraction_certificate,
    evolve_population,
    lyapunov_solve,
    steady_state,
)
from .optimizers.algorithms import composite_gradient
from .optimizers.objectives import QuadraticTest
from .optimizers.projections import capped_simplex_threshold, project_capped_simplex, project_norm_ball
from .sensitivity import sensitivity_exact, sensitivity_fd_oracle, sensitivity_implicit
from .transport import (
    DiscreteMeasure,
    ground_cost,
    vk_estimate,
    w1_categorical_1d,
    w1_discrete_exact,
)

CHECK_STREAM = 21


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def fail(self, what: str) -> None:
        self.failures.append(what)


def _fmt(x) -> str:
    return np.array2string(np.asarray(x), precision=6, separator=",", max_line_width=200)


def random_schur(m: int, n: int, r: int, rng, radius: float = 0.9) -> LinearDynamics:
    A = rng.standard_normal((m, m))
    A *= rng.uniform(0.1, radius) / np.max(np.abs(np.linalg.eigvals(A)))
    return LinearDynamics(A, rng.standard_normal((m, n)), rng.standard_normal((m, r)))


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def check_sensitivity(seed: int = 0, cases: int = 10, fault: bool = False) -> SuiteResult:
    """Closed-form and implicit sensitivities against central differences of ``h``."""
    res = SuiteResult("sensitivity")
    rng = make_rng(seed, 0, CHECK_STREAM)
    bump = 1e-3 if fault else 0.0
    for i in range(cases):
        model = random_schur(4, 3, 2, rng)
        u, d = rng.standard_normal(3), rng.standard_normal(2)
        H = sensitivity_exact(model, u, d).H * (1 + bump)
        err = relative_error(H, sensitivity_fd_oracle(model, u, d).H)
        res.cases += 1
        if err > 1e-6:
            res.fail(f"linear case {i}: rel err {err:.2e} > 1e-6, u={_fmt(u)}")

        sm = SoftmaxDynamics(0.2, 0.5, rng.uniform(0.2, 2.0))
        q = rng.uniform(0, 5, 6)
        p0 = rng.dirichlet(np.ones(6))
        H = sensitivity_exact(sm, q, p0).H * (1 + bump)
        err = relative_error(H, sensitivity_fd_oracle(sm, q, p0).H)
        res.cases += 1
        if err > 1e-6:
            res.fail(f"softmax case {i}: rel err {err:.2e} > 1e-6, q={_fmt(q)}")

        pm = PolarizedDynamics(0.4, 0.5)
        p0 = rng.standard_normal(5)
        p0 /= np.linalg.norm(p0)
        q = rng.standard_normal(5)
        q *= rng.uniform(0.1, 1.0) / np.linalg.norm(q)
        if p0 @ q < 0:
            q = -q
        p_ss = steady_state(pm, q, p0, tol=1e-13).p_ss
        H = sensitivity_exact(pm, q, p0, p_ss=p_ss).H * (1 + bump)
        err = relative_error(H, sensitivity_fd_oracle(pm, q, p0).H)
        err_imp = relative_error(sensitivity_implicit(pm, q, p0, p_ss).H, H)
        res.cases += 1
        if err > 1e-4 or (not fault and err_imp > 1e-8):
            res.fail(f"polarized case {i}: rel err {err:.2e} (implicit {err_imp:.2e}), q={_fmt(q)}")
    return res


def check_projection(seed: int = 0, cases: int = 200, fault: bool = False) -> SuiteResult:
    """KKT form, feasibility and idempotence of the projections."""
    res = SuiteResult("projection")
    rng = make_rng(seed, 1, CHECK_STREAM)
    for i in range(cases):
        m = int(rng.integers(2, 30))
        qbar = float(rng.uniform(0.1, 5.0))
        b = float(rng.uniform(0.05, 1.0)) * m * qbar
        v = rng.normal(0, 3, m)
        q = project_capped_simplex(v, b, qbar)
        if fault:
            q = q + 1e-6
        theta = capped_simplex_threshold(v, b, qbar)
        res.cases += 1
        problems = []
        if abs(q.sum() - b) > 1e-10:
            problems.append(f"sum {q.sum()!r} != {b!r}")
        if np.any(q < 0) or np.any(q > qbar):
            problems.append("box bounds violated")
        if np.max(np.abs(q - np.clip(v - theta, 0, qbar))) > 1e-10:
            problems.append("not of clip form")
        if np.max(np.abs(project_capped_simplex(q, b, qbar) - q)) > 1e-10:
            problems.append("not idempotent")
        if problems:
            res.fail(f"capped simplex case {i}: {'; '.join(problems)}; v={_fmt(v)}, b={b}, qbar={qbar}")
        w = rng.normal(0, 2, m)
        x = project_norm_ball(w, 1.0)
        y = project_norm_ball(v, 1.0)
        if np.linalg.norm(x - y) > np.linalg.norm(w - v) + 1e-12 or \
                np.linalg.norm(project_norm_ball(x, 1.0) - x) > 1e-15:
            res.fail(f"norm ball case {i}: expansion or non-idempotence, v={_fmt(v)}")
    return res


def brute_force_w1(a, b, C) -> float:
    """Minimum cost over every vertex of the transportation polytope.

    Vertices are basic solutions: choose ``m + n - 1`` cells whose columns in
    the marginal-constraint matrix (last row dropped) are independent, solve,
    and keep the nonnegative solutions.  Only sensible for a few atoms.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    m, n = C.shape
    k = m + n - 1
    cells = [(i, j) for i in range(m) for j in range(n)]
    A = np.zeros((m + n, m * n))
    for c, (i, j) in enumerate(cells):
        A[i, c] = 1.0
        A[m + j, c] = 1.0
    A = A[:-1]
    rhs = np.concatenate([a, b])[:-1]
    combos = np.array(list(itertools.combinations(range(m * n), k)))
    mats = A[:, combos].transpose(1, 0, 2)
    # the constraint matrix is totally unimodular: bases have |det| = 1
    ok = np.abs(np.linalg.det(mats)) > 0.5
    combos, mats = combos[ok], mats[ok]
    x = np.linalg.solve(mats, np.broadcast_to(rhs, (mats.shape[0], k))[:, :, None])[:, :, 0]
    feasible = np.all(x >= -1e-12, axis=1)
    costs = np.sum(x * C.ravel()[combos], axis=1)
    return float(np.min(costs[feasible]))


def check_w1(seed: int = 0, cases: int = 50, fault: bool = False) -> SuiteResult:
    """1D closed form vs exact solver, exact solver vs vertex enumeration, metric axioms."""
    res = SuiteResult("w1")
    rng = make_rng(seed, 2, CHECK_STREAM)
    bump = 1e-6 if fault else 0.0
    for i in range(cases):
        m = int(rng.integers(1, 7))
        p, q = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(m))
        exact = w1_discrete_exact(DiscreteMeasure.categorical(p), DiscreteMeasure.categorical(q),
                                  "index_abs").cost + bump
        res.cases += 1
        if abs(exact - w1_categorical_1d(p, q)) > 1e-9:
            res.fail(f"1d case {i}: exact {exact!r} vs cdf {w1_categorical_1d(p, q)!r}, p={_fmt(p)}, q={_fmt(q)}")
    for i in range(cases):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x, y = rng.standard_normal((m, 2)), rng.standard_normal((n, 2))
        a, b = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
        plan = w1_discrete_exact(DiscreteMeasure(x, a), DiscreteMeasure(y, b))
        brute = brute_force_w1(a, b, ground_cost(x, y))
        res.cases += 1
        if abs(plan.cost + bump - brute) > 1e-9:
            res.fail(f"vertex case {i}: simplex {plan.cost!r} vs enumeration {brute!r}")
        if np.max(np.abs(plan.plan.sum(1) - a)) > 1e-9 or np.max(np.abs(plan.plan.sum(0) - b)) > 1e-9:
            res.fail(f"vertex case {i}: marginals violated")
    for i in range(cases // 5):
        pts = rng.standard_normal((5, 2))
        mus = [DiscreteMeasure(pts, rng.dirichlet(np.ones(5))) for _ in range(3)]
        w = lambda s, t: w1_discrete_exact(mus[s], mus[t]).cost
        res.cases += 1
        if abs(w(0, 0)) > 1e-12 or abs(w(0, 1) - w(1, 0)) > 1e-9 or w(0, 2) > w(0, 1) + w(1, 2) + 1e-9:
            res.fail(f"metric axioms case {i} violated")
    return res


def check_lyapunov(seed: int = 0, cases: int = 20, pairs: int = 500,
                   fault: bool = False) -> SuiteResult:
    """Lyapunov residual and measured contraction of ``f`` in the ``P`` norm."""
    res = SuiteResult("lyapunov")
    rng = make_rng(seed, 3, CHECK_STREAM)
    for i in range(cases):
        model = random_schur(int(rng.integers(1, 8)), 2, 2, rng)
        cert = contraction_certificate(model)
        A, P = model.A, cert.P
        resid = np.linalg.norm(A.T @ P @ A - P + np.eye(A.shape[0]))
        res.cases += 1
        if resid > 1e-10:
            res.fail(f"case {i}: Lyapunov residual {resid:.2e}")
        L = np.linalg.cholesky(P)
        x = rng.standard_normal((pairs, A.shape[0]))
        y = rng.standard_normal((pairs, A.shape[0]))
        num = np.linalg.norm((x - y) @ A.T @ L, axis=1)
        den = np.linalg.norm((x - y) @ L, axis=1)
        ratio = float(np.max(num / den)) * (1.5 if fault else 1.0)
        if ratio > cert.Lfp + 1e-9:
            res.fail(f"case {i}: measured contraction {ratio:.6f} > certified {cert.Lfp:.6f}")
    return res


def vk_recursion_margins(model: LinearDynamics, steps: int, seed: int, eta: float = 0.05,
                         n_mb: int = 10, count: int = 100) -> np.ndarray:
    """Slack ``bound - V_{k+1}`` of the perturbed contraction along a composite run."""
    cert = contraction_certificate(model)
    pop = sample_gaussian(model.dim_state, model.E.shape[1], count, seed)
    targets = make_rng(seed, 0, CHECK_STREAM + 1).standard_normal(model.dim_state)
    obj = QuadraticTest(targets)
    rng = make_rng(seed, 1, CHECK_STREAM + 1)
    u = np.zeros(model.dim_decision)
    v = vk_estimate(pop, model, u, cert.P)
    coef = cert.Lfp * cert.Lhu * np.sqrt(cert.lambda_max)
    margins = np.empty(steps)
    for k in range(steps):
        idx = np.sort(rng.choice(len(pop), n_mb, replace=False))
        g = composite_gradient(obj, model, u, pop.take(idx))
        u_next = u - eta * g.total
        pop = evolve_population(model, pop, u_next)
        v_next = vk_estimate(pop, model, u_next, cert.P)
        margins[k] = cert.Lfp * v + coef * np.linalg.norm(u_next - u) - v_next
        u, v = u_next, v_next
    return margins


def check_vk(seed: int = 0, steps: int = 300, fault: bool = False) -> SuiteResult:
    """Perturbed contraction of the V_k estimate along a composite run (linear model)."""
    res = SuiteResult("vk")
    rng = make_rng(seed, 4, CHECK_STREAM)
    model = random_schur(4, 2, 2, rng, radius=0.8)
    margins = vk_recursion_margins(model, steps, seed)
    if fault:
        margins = margins - 1.0
    res.cases = steps
    bad = np.flatnonzero(margins < -1e-8)
    if bad.size:
        res.fail(f"recursion violated at iterations {bad[:5].tolist()} (worst slack {margins.min():.2e})")
    return res


def check_steady_state(seed: int = 0, cases: int = 20, fault: bool = False) -> SuiteResult:
    """Fixed-point iteration vs closed forms; polarized fixed points on the sphere."""
    res = SuiteResult("steady_state")
    rng = make_rng(seed, 5, CHECK_STREAM)
    for i in range(cases):
        model = random_schur(int(rng.integers(1, 10)), 3, 2, rng)
        u, d = rng.standard_normal(3), rng.standard_normal(2)
        it = steady_state(model, u, d, tol=1e-13, method="iterate").p_ss
        cf = model.closed_form(u, d) + (1e-6 if fault else 0.0)
        res.cases += 1
        if np.max(np.abs(it - cf)) > 1e-8:
            res.fail(f"linear case {i}: iteration and closed form differ by {np.max(np.abs(it - cf)):.2e}")
    pop = sample_hemisphere(6, 50, seed)
    pm = PolarizedDynamics(0.4, 0.5)
    q = pop.reference * 0.8
    p_ss = steady_state(pm, q, pop.d).p_ss
    res.cases += 1
    if np.max(np.abs(np.linalg.norm(p_ss, axis=1) - 1)) > 1e-12 or \
            np.max(np.abs(pm.step(p_ss, q, pop.d) - p_ss)) > 1e-9:
        res.fail("polarized steady states are not unit-norm fixed points")
    return res


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "sensitivity": check_sensitivity,
    "projection": check_projection,
    "w1": check_w1,
    "lyapunov": check_lyapunov,
    "vk": check_vk,
    "steady_state": check_steady_state,
}


def run_suites(names=None, seed: int = 0, fault: str | None = None) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}")
    return [SUITES[n](seed=seed, fault=(fault == n)) for n in names]
