import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import beta as beta_dist
from scipy.stats import binom

from divem import kernels
from divem.dirichlet import (
    DirichletModel,
    ObjectiveBundle,
    batch_em_step,
    digamma,
    newton_minimize,
    nll,
    online_em_step_sampled,
    sample_documents,
    solve_structured,
    trigamma,
    upper_bound_gradient,
    upper_bound_hessian,
    upper_bound_value,
)
from divem.errors import InvalidParameterError

from helpers import fd_gradient

GRID = [1e-8, 1e-3, 0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 5.999, 6.0, 6.001, 10.0, 57.3, 1e3, 1e6]


# --- special functions --------------------------------------------------------------


def test_digamma_against_mpmath(backend):
    got = digamma(np.array(GRID))
    want = np.array([float(mpmath.digamma(x)) for x in GRID])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_trigamma_against_mpmath(backend):
    got = trigamma(np.array(GRID))
    want = np.array([float(mpmath.polygamma(1, x)) for x in GRID])
    np.testing.assert_allclose(got, want, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(1e-6, 1e4))
def test_digamma_recurrence(x):
    a = digamma(np.array([x, x + 1]))
    assert a[1] - a[0] == pytest.approx(1 / x, rel=1e-11, abs=1e-12)


def test_backends_agree():
    backends = kernels.available_backends()
    x = np.random.default_rng(0).uniform(1e-4, 100, 500)
    ref = backends["python"]
    for mod in backends.values():
        np.testing.assert_allclose(mod.digamma(x), ref.digamma(x), rtol=1e-14, atol=1e-14)
        np.testing.assert_allclose(mod.trigamma(x), ref.trigamma(x), rtol=1e-14)


def test_special_functions_keep_shape():
    assert digamma(2.0).shape == ()
    assert trigamma(np.ones((2, 3))).shape == (2, 3)


# --- model and likelihood -----------------------------------------------------------


def test_alpha_must_be_positive():
    with pytest.raises(InvalidParameterError, match=r"alpha\[1\]"):
        DirichletModel([1.0, 0.0])


def test_alpha0_cached():
    m = DirichletModel([0.5, 1.25, 2.0])
    assert m.alpha0 == pytest.approx(3.75, abs=1e-12)


def test_nll_uniform_beta_one_draw():
    assert nll(DirichletModel([1.0, 1.0]), [[1, 0]]) == pytest.approx(math.log(2), abs=1e-14)


def test_nll_permutation_invariant(rng):
    a = rng.uniform(0.5, 3, 5)
    V = rng.integers(0, 6, (4, 5))
    V[:, 0] += 1
    perm = rng.permutation(5)
    assert nll(DirichletModel(a[perm]), V[:, perm]) == pytest.approx(nll(DirichletModel(a), V), rel=1e-13)


def test_nll_matches_quadrature():
    a = np.array([1.7, 0.6])
    counts = [[3, 4], [0, 5], [7, 1]]
    want = []
    for v in counts:
        L = sum(v)
        f = lambda h: beta_dist.pdf(h, a[0], a[1]) * binom.pmf(v[0], L, h)
        val, _ = integrate.quad(f, 0, 1, epsabs=1e-13, epsrel=1e-12, limit=200)
        want.append(-math.log(val))
    assert nll(DirichletModel(a), counts) == pytest.approx(np.mean(want), abs=1e-6)


def test_counts_validated():
    m = DirichletModel([1.0, 1.0])
    for bad in ([[0, 0]], [[-1, 2]], [[0.5, 1]], [[1, 2, 3]]):
        with pytest.raises(ValueError):
            nll(m, bad)


# --- upper bound, gradient, Hessian ----------------------------------------------------


def test_gradient_symmetric_case():
    m = DirichletModel([2.0, 2.0, 2.0])
    g = upper_bound_gradient(m, [1.5, 1.5, 1.5], [[3, 3, 3], [1, 1, 1]])
    np.testing.assert_allclose(g, g[0], rtol=1e-14)


def test_gradient_formula(rng):
    m = DirichletModel(rng.uniform(0.5, 3, 4))
    V = rng.integers(0, 10, (6, 4))
    V[:, 0] += 1
    at = rng.uniform(0.5, 3, 4)
    tot = V.sum(axis=1)
    want = (
        np.array([float(mpmath.digamma(x)) for x in at])
        - float(mpmath.digamma(at.sum()))
        + np.mean(
            [[float(mpmath.digamma(tot[n] + m.alpha0) - mpmath.digamma(V[n, i] + m.alpha[i])) for i in range(4)] for n in range(6)],
            axis=0,
        )
    )
    np.testing.assert_allclose(upper_bound_gradient(m, at, V), want, rtol=1e-11, atol=1e-12)


def test_gradient_and_hessian_match_finite_differences(rng):
    for _ in range(20):
        d = int(rng.integers(2, 6))
        m = DirichletModel(rng.uniform(0.3, 5, d))
        V = sample_documents(m, 10, 30, rng)
        at = rng.uniform(0.3, 5, d)
        g = upper_bound_gradient(m, at, V)
        num = fd_gradient(lambda x: upper_bound_value(m, x, V), at, h=1e-6)
        np.testing.assert_allclose(g, num, atol=1e-5)
        H = upper_bound_hessian(at)
        numH = np.array([fd_gradient(lambda x: upper_bound_gradient(m, x, V)[i], at, h=1e-6) for i in range(d)])
        np.testing.assert_allclose(H, numH, atol=1e-4)


def test_hessian_single_coordinate_is_zero():
    np.testing.assert_allclose(upper_bound_hessian([2.5]), [[0.0]], atol=1e-15)


def test_hessian_positive_definite(rng):
    for _ in range(20):
        assert np.linalg.eigvalsh(upper_bound_hessian(rng.uniform(0.01, 50, 6))).min() > 0


def test_sherman_morrison_matches_dense(rng):
    for _ in range(20):
        a = rng.uniform(0.05, 20, 7)
        g = rng.standard_normal(7)
        np.testing.assert_allclose(solve_structured(a, g), np.linalg.solve(upper_bound_hessian(a), g), rtol=1e-10, atol=1e-12)


def test_gradient_small_at_truth_for_large_sample(rng):
    m = DirichletModel([0.8, 1.5, 3.0])
    V = sample_documents(m, 5000, 100, rng)
    assert np.linalg.norm(upper_bound_gradient(m, m.alpha, V)) < 0.05


def test_bad_alpha_tilde():
    with pytest.raises(InvalidParameterError):
        upper_bound_hessian([1.0, -1.0])


# --- Newton ----------------------------------------------------------------------------


def _quadratic():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    target = np.array([1.0, 3.0])
    return ObjectiveBundle(
        value=lambda x: 0.5 * (x - target) @ H @ (x - target),
        gradient=lambda x: H @ (x - target),
        hessian=lambda x: H,
    ), target


def test_newton_quadratic_one_step():
    bundle, target = _quadratic()
    res = newton_minimize(bundle, [2.0, 2.0], tol=1e-12)
    assert res.converged and res.iterations == 1
    np.testing.assert_allclose(res.x, target, atol=1e-14)


def test_newton_warm_start():
    bundle, target = _quadratic()
    res = newton_minimize(bundle, target, tol=1e-12)
    assert res.converged and res.iterations == 0


def test_newton_stays_positive():
    # unconstrained minimiser lies outside the orthant
    bundle = ObjectiveBundle(
        value=lambda x: float((x[0] + 1.0) ** 2),
        gradient=lambda x: np.array([2 * (x[0] + 1.0)]),
        hessian=lambda x: np.array([[2.0]]),
    )
    res = newton_minimize(bundle, [1.0], tol=1e-12, max_iter=50)
    assert not res.converged
    assert res.x[0] > 0


def test_newton_reports_non_convergence():
    bundle, _ = _quadratic()
    res = newton_minimize(bundle, [50.0, 0.1], tol=1e-300, max_iter=0)
    assert not res.converged and res.iterations == 0


def test_newton_rejects_bad_start():
    bundle, _ = _quadratic()
    with pytest.raises(InvalidParameterError):
        newton_minimize(bundle, [0.0, 1.0])
    with pytest.raises(ValueError):
        newton_minimize(bundle, [1.0, 1.0], tol=0)


def test_recovers_known_alpha(rng):
    truth = DirichletModel([0.7, 2.0, 4.5])
    V = sample_documents(truth, 5000, 100, rng)
    m = DirichletModel([1.0, 1.0, 1.0])
    for _ in range(200):
        new = batch_em_step(m, V)
        done = np.abs(new.alpha - m.alpha).max() < 1e-9
        m = new
        if done:
            break
    np.testing.assert_allclose(m.alpha, truth.alpha, rtol=0.05)


def test_batch_em_monotone(rng):
    V = sample_documents(DirichletModel(rng.uniform(0.5, 4, 6)), 300, 50, rng)
    m = DirichletModel(np.ones(6))
    prev = nll(m, V)
    for _ in range(10):
        m = batch_em_step(m, V)
        cur = nll(m, V)
        assert cur <= prev + 1e-8
        prev = cur


# --- sampling and online step ------------------------------------------------------------


def test_single_coordinate_sampling(rng):
    np.testing.assert_array_equal(sample_documents(DirichletModel([2.0]), 3, 7, rng), [[7.0]] * 3)


def test_sample_mean_matches_alpha(rng):
    m = DirichletModel([0.5, 1.0, 2.5])
    V = sample_documents(m, 10_000, 40, rng)
    frac = V / 40
    se = frac.std(axis=0) / 100
    assert np.all(np.abs(frac.mean(axis=0) - m.alpha / m.alpha0) < 4 * se)


def test_sampling_deterministic():
    m = DirichletModel([0.5, 1.0, 2.5])
    a = sample_documents(m, 20, 10, np.random.default_rng(3))
    b = sample_documents(m, 20, 10, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_online_large_eta_is_batch_step(rng):
    m = DirichletModel([1.0, 2.0, 0.5])
    V = sample_documents(DirichletModel([2.0, 1.0, 1.0]), 50, 30, rng)
    out = online_em_step_sampled(m, V, 1e12, 100, rng)
    np.testing.assert_allclose(out.alpha, batch_em_step(m, V).alpha, rtol=1e-6)


def test_online_small_eta_drift(rng):
    m = DirichletModel([0.8, 1.5, 3.0])
    V = sample_documents(DirichletModel([3.0, 3.0, 0.5]), 20, 100, rng)
    drift = [
        np.abs(online_em_step_sampled(m, V, 1e-9, 2000, np.random.default_rng(s), pseudo_words=100).alpha - m.alpha)
        for s in range(5)
    ]
    assert np.all(np.mean(drift, axis=0) < 0.1)


def test_online_epoch_improves_nll(rng):
    truth = DirichletModel(rng.uniform(0.5, 5, 10))
    V = sample_documents(truth, 2000, 100, rng)
    m = DirichletModel(rng.uniform(0.5, 2, 10))
    start = nll(m, V)
    for t, i in enumerate(range(0, 2000, 100), start=1):
        m = online_em_step_sampled(m, V[i : i + 100], 1.0 / t**0.9, 2000, rng)
    assert nll(m, V) < start


def test_online_step_arguments(rng):
    m = DirichletModel([1.0, 1.0])
    with pytest.raises(ValueError):
        online_em_step_sampled(m, [[1, 1]], 0.0, 10, rng)
    with pytest.raises(ValueError):
        online_em_step_sampled(m, [[1, 1]], 1.0, 0, rng)
