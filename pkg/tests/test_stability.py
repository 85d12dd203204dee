import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from tdstab.chains import MarkovChain, build_simple_random_walk, perturbation_factor
from tdstab.config import poly_features
from tdstab.stability import (
    FeatureSetup,
    SingularSystemError,
    StabilityReport,
    analyze,
    assemble_A_b,
    corollary1_bound,
    corollary1_limits,
    exact_value_function,
    format_summary,
    is_negative_definite,
    lemma1_gamma_bounds,
    max_nd_gamma,
    projected_bellman_error,
    stability_matrix,
    symmetrized_D,
    td_fixed_point,
    theorem2_bound,
    theorem2_verdict,
)

from .conftest import random_features, random_reversible_pair


def grid_threshold(original, perturbed, phi, step=1e-4):
    """Largest grid gamma before the first non-negative-definite one."""
    best = 0.0
    for g in np.arange(step, 1.0, step):
        A = stability_matrix(original.P, perturbed.q, phi, g)
        if np.linalg.eigvalsh(0.5 * (A + A.T))[-1] >= -1e-10:
            break
        best = g
    return best


def generalized_threshold(original, perturbed, phi):
    """Exact edge: sym(-A) = M0 - gamma M1 loses definiteness at 1 / lambda_max(M1, M0)."""
    Qh = np.diag(perturbed.q)
    M0 = phi.T @ Qh @ phi
    M1 = phi.T @ (0.5 * (Qh @ original.P + original.P.T @ Qh)) @ phi
    lam = scipy.linalg.eigh(M1, M0, eigvals_only=True)[-1]
    return min(1.0, 1.0 / lam) if lam > 0 else 1.0


def random_reverse_support_chain(rng, n):
    """Non-reversible chain with symmetric support (dense, asymmetric weights)."""
    M = rng.random((n, n)) + 0.1
    return MarkovChain(M / M.sum(axis=1, keepdims=True))


# -- assembly ----------------------------------------------------------------

def test_assemble_two_state_by_hand():
    chain = MarkovChain(np.full((2, 2), 0.5))
    setup = FeatureSetup(np.ones((2, 1)), np.array([1.0, 0.0]), 0.5)
    A, b = assemble_A_b(chain, chain, setup)
    np.testing.assert_allclose(A, [[-0.5]], atol=1e-15)
    np.testing.assert_allclose(b, [0.5], atol=1e-15)


def test_assemble_identity_features_on_policy():
    chain = build_simple_random_walk(4, 2.0)
    setup = FeatureSetup(np.eye(4), np.arange(4.0), 0.3)
    A, _ = assemble_A_b(chain, chain, setup)
    np.testing.assert_allclose(A, 0.3 * chain.Q @ chain.P - chain.Q, atol=1e-15)


def test_b_ignores_gamma_and_P():
    a = build_simple_random_walk(4, 2.0)
    b_chain = build_simple_random_walk(4, 0.7)
    phi = poly_features(4, 2)
    r = np.array([1.0, -2.0, 0.5, 3.0])
    _, b1 = assemble_A_b(a, b_chain, FeatureSetup(phi, r, 0.2))
    _, b2 = assemble_A_b(b_chain, b_chain, FeatureSetup(phi, r, 0.9))
    np.testing.assert_array_equal(b1, b2)


def test_feature_setup_validation():
    with pytest.raises(ValueError, match="rank"):
        FeatureSetup(np.ones((3, 2)), np.zeros(3), 0.5)
    with pytest.raises(ValueError, match="gamma"):
        FeatureSetup(np.eye(3), np.zeros(3), 1.0)
    with pytest.raises(ValueError, match="more features"):
        FeatureSetup(np.ones((2, 3)), np.zeros(2), 0.5)


# -- D matrix ----------------------------------------------------------------

def test_D_small_gamma_and_diagonal(rng):
    original, perturbed = random_reversible_pair(rng, 6)
    np.testing.assert_allclose(symmetrized_D(original, perturbed, 1e-300), perturbed.Q, atol=1e-300)
    D = symmetrized_D(original, perturbed, 0.7)
    np.testing.assert_allclose(np.diag(D), (1 - 0.7 * np.diag(original.P)) * perturbed.q, rtol=1e-14)
    np.testing.assert_array_equal(D, D.T)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gamma=st.floats(0.01, 0.99))
def test_D_quadratic_form_identity(seed, gamma):
    rng = np.random.default_rng(seed)
    original, perturbed = random_reversible_pair(rng)
    B = perturbed.Q - gamma * perturbed.Q @ original.P
    D = symmetrized_D(original, perturbed, gamma)
    for x in rng.standard_normal((100, original.n)):
        assert abs(x @ B @ x - x @ D @ x) <= 1e-12 * max(1.0, x @ x)


# -- negative definiteness ---------------------------------------------------

def test_nd_examples():
    assert is_negative_definite(-np.eye(3)) == (True, 1.0)
    verdict, margin = is_negative_definite(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert not verdict and margin == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        is_negative_definite(np.ones((2, 3)))


def test_on_policy_always_nd(rng):
    for _ in range(50):
        chain, _ = random_reversible_pair(rng)
        phi = random_features(rng, chain.n)
        A, _ = assemble_A_b(chain, chain, FeatureSetup(phi, np.zeros(chain.n), 0.9))
        assert is_negative_definite(A)[0]


# -- bounds ------------------------------------------------------------------

def test_lemma1_on_policy_is_one(rng):
    for _ in range(20):
        chain, _ = random_reversible_pair(rng)
        np.testing.assert_allclose(lemma1_gamma_bounds(chain, chain), 1.0, atol=1e-12)


def test_lemma1_boundary_state_by_summation():
    original = build_simple_random_walk(5, 2.0)
    perturbed = build_simple_random_walk(5, 1.0)
    bounds = lemma1_gamma_bounds(original, perturbed)
    qh, P = perturbed.q, original.P
    inflow = sum(qh[j] * P[j, 0] for j in range(5)) / qh[0]
    assert bounds[0] == pytest.approx(2 / (1 + inflow), rel=1e-14)
    rho, delta = 2.0, 0.5
    assert bounds[0] == pytest.approx(2 * (rho + 1) / (rho + 2 + delta * rho), rel=1e-14)
    assert bounds[0] == pytest.approx(1.2, rel=1e-14)
    assert bounds.min() > 0


def test_theorem2_bound():
    assert theorem2_bound(1.0) == 1.0
    assert theorem2_bound(2.0) == pytest.approx(2 / 3, rel=1e-15)
    assert theorem2_bound(2.0**2) == pytest.approx(0.4, rel=1e-15)
    with pytest.raises(ValueError):
        theorem2_bound(0.9)
    assert theorem2_verdict(0.5, 2.0) == "guaranteed"
    assert theorem2_verdict(2 / 3, 2.0) == "boundary, no guarantee"
    assert theorem2_verdict(0.7, 2.0) == "no guarantee"


@pytest.mark.parametrize("rho", [0.1, 0.5, 1.0, 2.0, 17.0])
def test_corollary_at_delta_one(rho):
    assert corollary1_bound(rho, 1.0) == pytest.approx(1.0, abs=1e-15)


def test_corollary_values_and_limits():
    assert corollary1_bound(2.0, 2.0) == pytest.approx(0.75, rel=1e-15)
    for delta in (1.0, 2.0, 10.0):
        assert corollary1_bound(1e9, delta) == pytest.approx(2 / (1 + delta), rel=1e-8)
        assert corollary1_limits(delta)[0] == pytest.approx(2 / (1 + delta), rel=1e-15)
    for delta in (0.01, 0.3, 1.0):
        assert corollary1_bound(1e-9, delta) == pytest.approx(2 * delta / (1 + delta), rel=1e-8)
        assert corollary1_limits(delta)[1] == pytest.approx(2 * delta / (1 + delta), rel=1e-15)


@pytest.mark.parametrize("rho", [0.5, 2.0, 3.0])
@pytest.mark.parametrize("delta", [0.05, 0.5, 1.0, 1.7, 8.0])
@pytest.mark.parametrize("n", [3, 5, 8])
def test_corollary_equals_min_state_bound(rho, delta, n):
    original = build_simple_random_walk(n, rho)
    perturbed = build_simple_random_walk(n, rho * delta)
    assert corollary1_bound(rho, delta) == pytest.approx(lemma1_gamma_bounds(original, perturbed).min(), rel=1e-12)


# -- numerical threshold -----------------------------------------------------

def test_max_nd_on_policy(rng):
    chain, _ = random_reversible_pair(rng, 5)
    thr = max_nd_gamma(chain, chain, random_features(rng, 5, 3))
    assert thr.gamma >= 1 - 1e-6 and not thr.never_nd


def test_max_nd_matches_grid_sweep():
    original = build_simple_random_walk(5, 2.0)
    perturbed = build_simple_random_walk(5, 1.0)
    thr = max_nd_gamma(original, perturbed, np.eye(5))
    oracle = grid_threshold(original, perturbed, np.eye(5))
    assert abs(thr.gamma - oracle) <= 2e-4
    assert thr.gamma >= lemma1_gamma_bounds(original, perturbed).min()


def test_max_nd_matches_generalized_eigenvalue(rng):
    for _ in range(30):
        original, perturbed = random_reversible_pair(rng)
        phi = random_features(rng, original.n)
        exact = generalized_threshold(original, perturbed, phi)
        thr = max_nd_gamma(original, perturbed, phi, tol=1e-8)
        assert thr.gamma == pytest.approx(exact, abs=1e-6)
        assert thr.gamma >= lemma1_gamma_bounds(original, perturbed).min() - 1e-6


def test_max_nd_never():
    # a margin no instance can meet
    chain = build_simple_random_walk(3, 1.0)
    thr = max_nd_gamma(chain, chain, np.eye(3), nd_tol=10.0)
    assert thr.never_nd and thr.gamma == 0.0


# -- fixed point, value function, PBE ----------------------------------------

def test_tabular_fixed_point_is_value_function(rng):
    for _ in range(20):
        original, perturbed = random_reversible_pair(rng)
        r = rng.standard_normal(original.n)
        setup = FeatureSetup(np.eye(original.n), r, 0.8)
        w = td_fixed_point(*assemble_A_b(original, perturbed, setup))
        np.testing.assert_allclose(w, exact_value_function(original, r, 0.8), atol=1e-9)


def test_fixed_point_basics(rng):
    A = -np.eye(3) + 0.1 * rng.standard_normal((3, 3))
    np.testing.assert_array_equal(td_fixed_point(A, np.zeros(3)), np.zeros(3))
    b = rng.standard_normal(3)
    assert np.linalg.norm(A @ td_fixed_point(A, b) + b) <= 1e-10
    with pytest.raises(SingularSystemError, match="reduce gamma"):
        td_fixed_point(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2))


def test_value_function_closed_forms():
    chain = build_simple_random_walk(4, 2.0)
    np.testing.assert_array_equal(exact_value_function(chain, np.zeros(4), 0.9), np.zeros(4))
    np.testing.assert_allclose(exact_value_function(chain, np.ones(4), 0.9), np.full(4, 10.0), rtol=1e-13)


def test_value_function_monte_carlo():
    rng = np.random.default_rng(7)
    chain = build_simple_random_walk(4, 2.0)
    r = np.array([1.0, -1.0, 2.0, 0.5])
    gamma, horizon, m = 0.7, 80, 100_000
    V = exact_value_function(chain, r, gamma)
    cum = np.cumsum(chain.P, axis=1)
    for start in range(4):
        s = np.full(m, start)
        ret = np.zeros(m)
        for t in range(horizon):
            ret += gamma**t * r[s]
            s = np.minimum((rng.random(m)[:, None] >= cum[s]).sum(axis=1), 3)
        se = ret.std(ddof=1) / np.sqrt(m)
        assert abs(ret.mean() - V[start]) <= 3 * se


def test_pbe_zero_at_fixed_point(rng):
    for _ in range(20):
        original, perturbed = random_reversible_pair(rng)
        setup = FeatureSetup(random_features(rng, original.n), rng.standard_normal(original.n), 0.6)
        w = td_fixed_point(*assemble_A_b(original, perturbed, setup))
        assert projected_bellman_error(w, original, perturbed, setup) <= 1e-10


def test_pbe_tabular_value_function():
    original = build_simple_random_walk(5, 2.0)
    perturbed = build_simple_random_walk(5, 0.5)
    r = np.arange(5.0)
    setup = FeatureSetup(np.eye(5), r, 0.9)
    V = exact_value_function(original, r, 0.9)
    assert projected_bellman_error(V, original, perturbed, setup) <= 1e-12
    assert projected_bellman_error(np.zeros(5), original, perturbed, setup) > 0.1


def test_pbe_reparameterization_invariant(rng):
    original, perturbed = random_reversible_pair(rng, 6)
    phi = random_features(rng, 6, 3)
    r = rng.standard_normal(6)
    M = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    w = rng.standard_normal(3)
    a = projected_bellman_error(w, original, perturbed, FeatureSetup(phi, r, 0.5))
    b = projected_bellman_error(np.linalg.solve(M, w), original, perturbed, FeatureSetup(phi @ M, r, 0.5))
    assert a == pytest.approx(b, rel=1e-9)


# -- properties over random instances ----------------------------------------

def test_lemma1_sufficiency_random():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        original, perturbed = random_reversible_pair(rng)
        phi = random_features(rng, original.n)
        g = 0.99 * lemma1_gamma_bounds(original, perturbed).min()
        assert is_negative_definite(stability_matrix(original.P, perturbed.q, phi, g))[0]


def test_theorem2_below_lemma1():
    rng = np.random.default_rng(2)
    for _ in range(300):
        original, perturbed = random_reversible_pair(rng)
        c = perturbation_factor(original, perturbed)
        assert theorem2_bound(c) <= lemma1_gamma_bounds(original, perturbed).min() + 1e-12


def test_non_reversible_original_reverse_support():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n = int(rng.integers(2, 8))
        original = random_reverse_support_chain(rng, n)
        _, perturbed = random_reversible_pair(rng, n)
        perturbed = MarkovChain(0.5 * perturbed.P + 0.5 * np.full((n, n), 1.0 / n))  # dense, still reversible
        phi = random_features(rng, n)
        bounds = lemma1_gamma_bounds(original, perturbed)
        assert is_negative_definite(stability_matrix(original.P, perturbed.q, phi, 0.99 * bounds.min()))[0]
        assert theorem2_bound(perturbation_factor(original, perturbed)) <= bounds.min() + 1e-12


def test_gap_on_simple_walks():
    phi = poly_features(5, 3)
    gaps = []
    for delta in (0.25, 4.0):
        original = build_simple_random_walk(5, 2.0)
        perturbed = build_simple_random_walk(5, 2.0 * delta)
        gaps.append(max_nd_gamma(original, perturbed, phi).gamma - lemma1_gamma_bounds(original, perturbed).min())
    assert max(gaps) > 0


# -- report ------------------------------------------------------------------

def test_analyze_report_round_trip(walk_fixture):
    original, perturbed, setup = walk_fixture
    report = analyze(original, perturbed, setup)
    assert report.theorem2_bound == pytest.approx(2 / 3)
    assert report.theorem2_bound <= report.lemma1_min <= report.max_nd_gamma
    assert report.corollary1_bound == pytest.approx(report.lemma1_min, rel=1e-12)
    assert report.is_nd == (report.min_sym_eig > 0)
    assert report.pbe_at_w_star <= 1e-10
    data = json.loads(json.dumps(report.to_dict()))
    again = StabilityReport.from_dict(data)
    np.testing.assert_array_equal(again.A, report.A)
    assert again.to_dict() == data
    text = format_summary(report)
    assert "theorem2_bound = 0.666666666667" in text
