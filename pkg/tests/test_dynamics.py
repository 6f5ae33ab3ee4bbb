import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddopt.distributions import Population, sample_hemisphere
from ddopt.dynamics import (
    LinearDynamics,
    PolarizedDynamics,
    SoftmaxDynamics,
    contraction_certificate,
    evolve_population,
    lyapunov_solve,
    softmax,
    step,
    steady_state,
)
from ddopt.errors import (
    DegenerateStateError,
    NonConvergenceError,
    SizeError,
    StabilityError,
    UnsupportedCertificateError,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_schur(rng, m, n=2, r=2, radius=0.9):
    A = rng.standard_normal((m, m))
    A *= rng.uniform(0.05, radius) / np.max(np.abs(np.linalg.eigvals(A)))
    return LinearDynamics(A, rng.standard_normal((m, n)), rng.standard_normal((m, r)))


# ---- step -----------------------------------------------------------------

def test_polarized_orthogonal_decision_leaves_initial_position():
    model = PolarizedDynamics(0.4, 0.5)
    p0 = np.array([1.0, 0.0, 0.0])
    q = np.array([0.0, 0.6, 0.8])
    np.testing.assert_allclose(step(model, p0, q, p0), p0, atol=1e-15)


def test_linear_step_substitution():
    model = LinearDynamics(0.5 * np.eye(2), np.eye(2), np.zeros((2, 2)))
    np.testing.assert_allclose(step(model, [0, 0], [1, 1], [0, 0]), [1.0, 1.0])


def test_softmax_step_substitution():
    model = SoftmaxDynamics(0.2, 0.5, 0.5)
    out = step(model, [1.0, 0.0], [0.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(out, [0.75, 0.25], atol=1e-15)


def test_polarized_step_requires_unit_state():
    model = PolarizedDynamics(0.4, 0.5)
    with pytest.raises(SizeError):
        step(model, [2.0, 0.0], [0.1, 0.0], [1.0, 0.0])


def test_polarized_degenerate_normalization():
    # lam p + (1 - lam) p0 + sigma (p.q) q vanishes for p = -p0 with lam = 0.5, q = 0
    model = PolarizedDynamics(0.5, 0.5)
    with pytest.raises(DegenerateStateError):
        step(model, [-1.0, 0.0], [0.0, 0.0], [1.0, 0.0])


def test_degenerate_error_names_the_individual():
    model = PolarizedDynamics(0.5, 0.5)
    p0 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    p = p0.copy()
    p[2] = [-1.0, 0.0]
    pop = Population(p0, p0, p)
    with pytest.raises(DegenerateStateError) as info:
        evolve_population(model, pop, np.zeros(2))
    assert info.value.index == 2
    assert "individual 2" in str(info.value)


@given(seed=st.integers(0, 2**31), m=st.integers(2, 8))
@settings(max_examples=50, deadline=None)
def test_polarized_step_stays_on_sphere(seed, m):
    rng = np.random.default_rng(seed)
    p0 = unit(rng.standard_normal(m))
    p = unit(rng.standard_normal(m))
    if p @ p0 < 0:
        p = -p
    q = rng.standard_normal(m)
    q *= rng.uniform(0, 1) / np.linalg.norm(q)
    out = step(PolarizedDynamics(0.4, 0.5), p, q, p0)
    assert abs(np.linalg.norm(out) - 1) <= 1e-12


@given(seed=st.integers(0, 2**31), m=st.integers(2, 10),
       l1=st.floats(0, 0.95), frac=st.floats(0, 1), eps=st.floats(0.01, 5))
@settings(max_examples=60, deadline=None)
def test_softmax_step_preserves_the_simplex(seed, m, l1, frac, eps):
    rng = np.random.default_rng(seed)
    l2 = frac * (1 - l1)
    p, p0 = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(m))
    out = step(SoftmaxDynamics(l1, l2, eps), p, rng.uniform(-5, 5, m), p0)
    assert np.all(out >= -1e-12)
    assert abs(out.sum() - 1) <= 1e-12


def test_softmax_is_overflow_safe():
    z = softmax(np.array([1000.0, 999.0]))
    np.testing.assert_allclose(z, [1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1))])


def test_model_validation():
    with pytest.raises(StabilityError):
        LinearDynamics(np.eye(2), np.eye(2), np.eye(2)).validate()
    with pytest.raises(StabilityError):
        PolarizedDynamics(1.0, 0.5).validate()
    with pytest.raises(StabilityError):
        PolarizedDynamics(0.4, 0.0).validate()
    with pytest.raises(StabilityError):
        SoftmaxDynamics(0.6, 0.5, 1.0).validate()


# ---- steady states --------------------------------------------------------

def test_linear_steady_state_closed_form():
    model = LinearDynamics(0.5 * np.eye(2), np.eye(2), np.eye(2))
    np.testing.assert_allclose(steady_state(model, [1, 0], [0, 1]).p_ss, [2.0, 2.0])


def test_softmax_steady_state_closed_form_and_iteration():
    model = SoftmaxDynamics(0.2, 0.5, 0.5)
    cf = steady_state(model, [0.0, 0.0], [1.0, 0.0]).p_ss
    it = steady_state(model, [0.0, 0.0], [1.0, 0.0], tol=1e-14, method="iterate").p_ss
    np.testing.assert_allclose(cf, [0.6875, 0.3125], atol=1e-15)
    np.testing.assert_allclose(it, cf, atol=1e-13)


def test_polarized_orthogonal_steady_state_is_initial_position():
    model = PolarizedDynamics(0.4, 0.5)
    p0 = np.array([0.0, 1.0, 0.0])
    q = np.array([0.7, 0.0, 0.0])
    np.testing.assert_allclose(steady_state(model, q, p0).p_ss, p0, atol=1e-12)


@pytest.mark.parametrize("method", ["auto", "iterate"])
def test_polarized_fixed_point_residual(method):
    model = PolarizedDynamics(0.4, 0.5)
    pop = sample_hemisphere(8, 200, seed=3)
    q = 0.9 * pop.reference
    tol = 1e-10
    p_ss = steady_state(model, q, pop.d, tol=tol, method=method).p_ss
    resid = np.linalg.norm(model.step(p_ss, q, pop.d) - p_ss, axis=1)
    assert resid.max() <= 10 * tol


def test_polarized_newton_and_plain_iteration_agree():
    model = PolarizedDynamics(0.4, 0.5)
    pop = sample_hemisphere(20, 100, seed=8)
    rng = np.random.default_rng(0)
    q = unit(rng.standard_normal(20))
    fast = steady_state(model, q, pop.d, tol=1e-13)
    slow = steady_state(model, q, pop.d, tol=1e-13, method="iterate")
    np.testing.assert_allclose(fast.p_ss, slow.p_ss, atol=1e-11)
    assert fast.iters < slow.iters


def test_steady_state_non_convergence_carries_residual():
    model = PolarizedDynamics(0.4, 0.5)
    with pytest.raises(NonConvergenceError) as info:
        steady_state(model, [0.9, 0.1], unit([0.3, 1.0]), tol=1e-15, max_iter=2, method="iterate")
    assert np.isfinite(info.value.residual)
    assert "residual" in str(info.value)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_linear_iteration_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    model = random_schur(rng, int(rng.integers(1, 11)))
    u, d = rng.standard_normal(2), rng.standard_normal(2)
    it = steady_state(model, u, d, tol=1e-13, method="iterate").p_ss
    np.testing.assert_allclose(it, model.closed_form(u, d), atol=1e-8)


def test_evolution_converges_to_steady_states():
    model = PolarizedDynamics(0.4, 0.5)
    pop = sample_hemisphere(5, 50, seed=2)
    q = 0.7 * pop.reference
    for _ in range(300):
        pop = evolve_population(model, pop, q)
    np.testing.assert_allclose(pop.p, steady_state(model, q, pop.d).p_ss, atol=1e-9)


def test_single_individual_evolution_equals_step():
    model = SoftmaxDynamics(0.2, 0.5, 0.5)
    pop = Population([[0.2, 0.8]], [[0.5, 0.5]], [[0.2, 0.8]])
    out = evolve_population(model, pop, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(out.p[0], step(model, [0.2, 0.8], [1.0, 2.0], [0.5, 0.5]))


def test_polarized_angles_shrink_in_one_application():
    model = PolarizedDynamics(0.4, 0.5)
    pop = sample_hemisphere(10, 500, seed=4)
    q = 0.8 * pop.reference
    before = np.arccos(np.clip(pop.p @ unit(q), -1, 1))
    after_pop = evolve_population(model, pop, q)
    after = np.arccos(np.clip(after_pop.p @ unit(q), -1, 1))
    assert np.all(after <= before + 1e-12)


@given(seed=st.integers(0, 2**31), m=st.integers(2, 6))
@settings(max_examples=30, deadline=None)
def test_polarized_sign_and_angle_monotone_along_trajectory(seed, m):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(m)
    q *= rng.uniform(0.1, 1.0) / np.linalg.norm(q)
    p0 = unit(rng.standard_normal(m))
    if p0 @ q < 0:
        p0 = -p0
    model = PolarizedDynamics(0.4, 0.5)
    p = p0
    cos = p @ unit(q)
    for _ in range(50):
        p = step(model, p, q, p0)
        new_cos = p @ unit(q)
        assert new_cos > 0
        assert new_cos >= cos - 1e-12
        cos = new_cos


# ---- Lyapunov and certificates -------------------------------------------

def test_lyapunov_zero_dynamics():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(lyapunov_solve(np.zeros((2, 2)), Q), Q)


def test_lyapunov_scaled_identity():
    P = lyapunov_solve(0.5 * np.eye(2), np.eye(2))
    np.testing.assert_allclose(P, (4 / 3) * np.eye(2), atol=1e-14)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_lyapunov_residual_on_random_schur(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 11))
    model = random_schur(rng, m)
    Q = np.eye(m)
    P = lyapunov_solve(model.A, Q)
    assert np.linalg.norm(model.A.T @ P @ model.A - P + Q) <= 1e-10 * np.linalg.norm(Q)
    assert np.all(np.linalg.eigvalsh(P) > 0)


def test_lyapunov_rejects_unstable_and_large():
    with pytest.raises(StabilityError):
        lyapunov_solve(1.1 * np.eye(2), np.eye(2))
    with pytest.raises(SizeError):
        lyapunov_solve(np.zeros((51, 51)), np.eye(51))


def test_linear_certificate_example():
    cert = contraction_certificate(LinearDynamics(0.5 * np.eye(2), np.eye(2), np.eye(2)))
    np.testing.assert_allclose(cert.P, (4 / 3) * np.eye(2), atol=1e-14)
    assert cert.Lfp == pytest.approx(0.5, abs=1e-14)
    assert cert.rho1 == pytest.approx((1 + 0.25) / 2)
    expected_rho2 = (1.25 / 0.75) * (0.5 * cert.Lhu) ** 2 * (4 / 3)
    assert cert.rho2 == pytest.approx(expected_rho2)


def test_softmax_certificate_example():
    cert = contraction_certificate(SoftmaxDynamics(0.2, 0.5, 0.5), dim=3)
    assert cert.Lfp == pytest.approx(0.2)
    assert cert.rho1 == pytest.approx(0.52)
    assert cert.Lhu == pytest.approx(0.5 * 0.5 / (2 * 0.8))
    assert 0 < cert.rho1 < 1


def test_polarized_certificate_unsupported():
    with pytest.raises(UnsupportedCertificateError):
        contraction_certificate(PolarizedDynamics(0.4, 0.5))


@given(seed=st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_certified_contraction_holds(seed):
    rng = np.random.default_rng(seed)
    model = random_schur(rng, int(rng.integers(1, 7)))
    cert = contraction_certificate(model)
    assert 0 < cert.rho1 < 1
    L = np.linalg.cholesky(cert.P)
    x = rng.standard_normal((200, model.dim_state))
    y = rng.standard_normal((200, model.dim_state))
    u, d = rng.standard_normal(2), rng.standard_normal(2)
    fx, fy = model.step(x, u, d), model.step(y, u, d)
    ratio = np.linalg.norm((fx - fy) @ L, axis=1) / np.linalg.norm((x - y) @ L, axis=1)
    assert ratio.max() <= cert.Lfp + 1e-9


@given(arrays(float, 4, elements=st.floats(-3, 3)), arrays(float, 4, elements=st.floats(-3, 3)))
@settings(max_examples=40, deadline=None)
def test_softmax_steady_state_lipschitz_bound(q1, q2):
    model = SoftmaxDynamics(0.2, 0.5, 0.5)
    cert = contraction_certificate(model, dim=4)
    p0 = np.full(4, 0.25)
    h1, h2 = model.closed_form(q1, p0), model.closed_form(q2, p0)
    assert np.linalg.norm(h1 - h2) <= cert.Lhu * np.linalg.norm(q1 - q2) + 1e-12
