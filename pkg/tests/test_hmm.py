import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from divem import mixture
from divem.errors import InvalidModelError, InvalidParameterError, NumericalError
from divem.expfam import NaturalParams, bregman_divergence, gaussian_pack, make_gaussian_spec, make_poisson_spec
from divem.hmm import (
    HmmModel,
    batch_em_step,
    em_upper_bound,
    expected_usage,
    forward_backward,
    hmm_divergence,
    init_from_data,
    joint_log_prob,
    nll,
    online_em_step,
    sample_sequences,
)

from helpers import emission_logpdf, enumerate_paths, fd_gradient, hmm_from_free, hmm_to_free, random_gaussian_hmm

POISSON = make_poisson_spec()


def chain(pi, A, means, s):
    spec = make_gaussian_spec(1)
    E = [gaussian_pack([m], [[1.0]]) for m in means]
    return HmmModel(spec, pi, A, E, s)


# --- model validation ----------------------------------------------------------------


def test_rows_must_be_stochastic():
    A = np.array([[0.5, 0.6], [0.0, 1.0]])
    with pytest.raises(InvalidParameterError, match="row 0"):
        chain([1, 0], A, [0.0], 1)


def test_absorbing_rows_must_be_identity():
    A = np.array([[0.5, 0.25, 0.25], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    with pytest.raises(InvalidModelError):
        chain([1, 0, 0], A, [0.0], 1)


def test_closed_transient_block_has_no_usage():
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    m = chain([1, 0], A, [0.0], 1)
    with pytest.raises(InvalidModelError):
        expected_usage(m)


# --- forward-backward ----------------------------------------------------------------


def test_matches_path_enumeration(rng, backend):
    m = random_gaussian_hmm(rng, 3, 1, 2)
    X = rng.standard_normal((5, 2)) * 2
    post = forward_backward(m, X)
    state, pair, exits, ll = enumerate_paths(m, X)
    np.testing.assert_allclose(post.state_marginals, state, atol=1e-10)
    np.testing.assert_allclose(post.pair_marginals, pair, atol=1e-10)
    np.testing.assert_allclose(post.exit_marginals, exits, atol=1e-10)
    assert post.log_likelihood == pytest.approx(ll, abs=1e-10)


def test_poisson_matches_path_enumeration(rng, backend):
    A = np.zeros((4, 4))
    A[:2, :2] = [[0.5, 0.3], [0.2, 0.6]]
    A[:2, 2:] = [[0.1, 0.1], [0.15, 0.05]]
    A[2:, 2:] = np.eye(2)
    m = HmmModel(POISSON, [0.4, 0.6, 0, 0], A, [[1.5], [7.0]], 2)
    X = np.array([[0], [3], [9], [5]])
    post = forward_backward(m, X)
    state, pair, exits, ll = enumerate_paths(m, X)
    np.testing.assert_allclose(post.state_marginals, state, atol=1e-10)
    np.testing.assert_allclose(post.exit_marginals, exits, atol=1e-10)
    assert post.log_likelihood == pytest.approx(ll, abs=1e-10)


def test_marginals_consistent(rng, backend):
    m = random_gaussian_hmm(rng, 4, 2, 3)
    X = rng.standard_normal((30, 3))
    post = forward_backward(m, X)
    g, p = post.state_marginals, post.pair_marginals
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p.sum(axis=2), g[:-1], atol=1e-10)
    np.testing.assert_allclose(p.sum(axis=1), g[1:], atol=1e-10)
    np.testing.assert_allclose(post.exit_marginals.sum(axis=1), g[-1], atol=1e-10)


def test_single_step_is_a_mixture_posterior(rng, backend):
    m = random_gaussian_hmm(rng, 3, 1, 2)
    x = rng.standard_normal((1, 2))
    s = m.s
    # the exit step weights each state by its exit probability
    w = m.initial[:s] * m.exit_probs
    mix = mixture.MixtureModel(m.spec, w / w.sum(), m.emissions)
    got = forward_backward(m, x).state_marginals[0, :s]
    np.testing.assert_allclose(got, mixture.posterior(mix, x).gamma[0], atol=1e-12)


def test_single_step_equal_exits_uses_initial(rng, backend):
    A = np.array([[0.3, 0.5, 0.2], [0.6, 0.2, 0.2], [0, 0, 1.0]])
    m = chain([0.3, 0.7, 0], A, [0.0, 2.0], 2)
    mix = mixture.MixtureModel(m.spec, [0.3, 0.7], m.emissions)
    got = forward_backward(m, [[0.8]]).state_marginals[0, :2]
    np.testing.assert_allclose(got, mixture.posterior(mix, [[0.8]]).gamma[0], atol=1e-12)


def test_deterministic_chain(backend):
    A = np.zeros((4, 4))
    A[0, 1] = A[1, 2] = A[2, 3] = A[3, 3] = 1.0
    m = chain([1, 0, 0, 0], A, [0.0, 5.0, -5.0], 3)
    post = forward_backward(m, [[0.1], [4.0], [-3.0]])
    np.testing.assert_allclose(post.state_marginals[:, :3], np.eye(3), atol=1e-15)


def test_impossible_sequence_reported(backend):
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 2] = A[2, 2] = 1.0
    m = chain([1, 0, 0], A, [0.0, 1.0], 2)
    # length 3 is impossible: the chain must exit after two visits
    with pytest.raises(NumericalError, match="time 2"):
        forward_backward(m, [[0.0], [1.0], [0.0]])


def test_empty_sequence_rejected(rng):
    with pytest.raises(ValueError):
        forward_backward(random_gaussian_hmm(rng, 2, 1, 1), np.zeros((0, 1)))


def test_backends_agree(rng):
    from divem import kernels

    backends = kernels.available_backends()
    if len(backends) < 2:
        pytest.skip("compiled backend not built")
    m = random_gaussian_hmm(rng, 5, 2, 2)
    log_b = rng.standard_normal((200, 5))
    args = (log_b, m.initial[:5], m.Q, m.exit_probs, True)
    a = backends["python"].hmm_forward_backward(*args)
    b = backends["cython"].hmm_forward_backward(*args)
    for x, y in zip(a[:4], b[:4]):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-14)
    assert a[4] == b[4]


# --- likelihood ----------------------------------------------------------------------


def test_nll_matches_enumeration(rng, backend):
    m = random_gaussian_hmm(rng, 3, 1, 2)
    seqs = [rng.standard_normal((5, 2)) for _ in range(3)]
    want = -np.mean([enumerate_paths(m, x)[3] for x in seqs])
    assert nll(m, seqs) == pytest.approx(want, abs=1e-10)


def test_single_state_chain_is_iid():
    A = np.array([[0.75, 0.25], [0.0, 1.0]])
    m = chain([1, 0], A, [1.0], 1)
    X = np.array([[0.0], [2.0], [1.5]])
    want = -(np.sum([emission_logpdf(m, 0, x) for x in X]) + 2 * math.log(0.75) + math.log(0.25))
    assert nll(m, [X]) == pytest.approx(want, rel=1e-12)


def test_nll_order_invariant(rng):
    m = random_gaussian_hmm(rng, 3, 1, 2)
    seqs = sample_sequences(m, 6, rng, max_len=50)
    assert nll(m, seqs[::-1]) == pytest.approx(nll(m, seqs), rel=1e-14)


def test_joint_log_prob_sums_to_likelihood(rng):
    m = random_gaussian_hmm(rng, 2, 2, 1)
    X = rng.standard_normal((3, 1))
    total = 0.0
    for path in itertools.product(range(2), repeat=3):
        for r in (2, 3):
            total += math.exp(joint_log_prob(m, list(path) + [r], X))
    assert -math.log(total) == pytest.approx(nll(m, [X]), rel=1e-12)


# --- usage -----------------------------------------------------------------------------


def test_usage_immediate_absorption():
    A = np.array([[0, 0, 1.0], [0, 0, 1.0], [0, 0, 1.0]])
    m = chain([0.4, 0.6, 0], A, [0.0, 1.0], 2)
    np.testing.assert_allclose(expected_usage(m), [0.4, 0.6], atol=1e-15)


def test_usage_geometric_series():
    q = 0.8
    m = chain([1, 0], [[q, 1 - q], [0, 1.0]], [0.0], 1)
    assert expected_usage(m)[0] == pytest.approx(1 / (1 - q), rel=1e-13)


def test_usage_truncated_series(rng):
    for _ in range(20):
        m = random_gaussian_hmm(rng, 4, 2, 1)
        pi, Q = m.initial[: m.s], m.Q
        acc, term = np.zeros(m.s), pi.copy()
        for _ in range(1001):
            acc += term
            term = term @ Q
        np.testing.assert_allclose(expected_usage(m), acc, atol=1e-8)


def test_sampled_length_matches_usage(rng):
    m = random_gaussian_hmm(rng, 3, 1, 1)
    lengths = np.array([len(x) for x in sample_sequences(m, 10_000, rng, max_len=10_000)])
    se = lengths.std() / math.sqrt(len(lengths))
    assert abs(lengths.mean() - expected_usage(m).sum()) < 3 * se


# --- sampling ---------------------------------------------------------------------------


def test_immediate_absorption_gives_empty_sequences(rng):
    m = chain([0, 1.0], [[0, 1.0], [0, 1.0]], [0.0], 1)
    # pi puts all mass on the absorbing state
    assert all(len(x) == 0 for x in sample_sequences(m, 5, rng, max_len=10))


def test_deterministic_two_step_sampling(rng):
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 2] = A[2, 2] = 1.0
    m = chain([1, 0, 0], A, [0.0, 1.0], 2)
    seqs, paths = sample_sequences(m, 5, rng, max_len=10, return_states=True)
    assert all(len(x) == 2 for x in seqs)
    assert all(list(p) == [0, 1, 2] for p in paths)


def test_max_len_caps_sequences(rng):
    m = chain([1, 0], [[0.99, 0.01], [0, 1.0]], [0.0], 1)
    assert max(len(x) for x in sample_sequences(m, 20, rng, max_len=7)) <= 7
    with pytest.raises(ValueError):
        sample_sequences(m, 1, rng, max_len=0)


# --- updates --------------------------------------------------------------------------


def _data(rng, m, n=4):
    return sample_sequences(m, n, rng, max_len=30)


@pytest.mark.parametrize("eta, reference", [(1e12, "batch"), (1e-12, "same")])
def test_online_limits(rng, eta, reference, backend):
    m = random_gaussian_hmm(rng, 3, 1, 2)
    seqs = _data(rng, random_gaussian_hmm(rng, 3, 1, 2), 6)
    out = online_em_step(m, seqs, eta)
    ref = batch_em_step(m, seqs) if reference == "batch" else m
    # relative to each parameter block: tiny probabilities carry O(1/eta) noise
    for name in ("initial", "transitions", "emissions"):
        a, b = getattr(out, name), getattr(ref, name)
        assert np.abs(a - b).max() <= 1e-8 * np.abs(b).max()


def test_online_step_formula(rng):
    m = random_gaussian_hmm(rng, 2, 1, 1)
    seqs = _data(rng, m, 3)
    eta = 0.4
    u = expected_usage(m)
    posts = [forward_backward(m, x) for x in seqs]
    N = len(seqs)
    s = m.s
    g1 = sum(p.state_marginals[0] for p in posts) / N
    pairs = sum(p.pair_marginals.sum(axis=0) + p.exit_marginals for p in posts) / N
    occ = sum(p.state_marginals.sum(axis=0) for p in posts) / N
    pi = (m.initial / eta + g1) / (1 / eta + 1)
    A = (u[:, None] * m.transitions[:s] / eta + pairs[:s]) / (u / eta + occ[:s])[:, None]
    out = online_em_step(m, seqs, eta)
    np.testing.assert_allclose(out.initial, pi, rtol=1e-12)
    np.testing.assert_allclose(out.transitions[:s], A, rtol=1e-10)
    np.testing.assert_array_equal(out.transitions[s:], m.transitions[s:])


def _objective(model, seqs, eta):
    def f(x):
        tilde = hmm_from_free(x, model)
        return em_upper_bound(model, tilde, seqs) + hmm_divergence(model, tilde) / eta

    return f


def test_online_step_is_stationary(rng):
    m = random_gaussian_hmm(rng, 2, 1, 2)
    seqs = _data(rng, m, 3)
    eta = 0.6
    out = online_em_step(m, seqs, eta)
    g = fd_gradient(_objective(m, seqs, eta), hmm_to_free(out), h=1e-5)
    assert np.linalg.norm(g) < 1e-6


def test_batch_em_monotone(rng, backend):
    truth = random_gaussian_hmm(rng, 3, 1, 2)
    seqs = sample_sequences(truth, 40, rng, max_len=100)
    m = init_from_data(truth.spec, seqs, 3, 1, rng)
    prev = nll(m, seqs)
    for _ in range(15):
        m = batch_em_step(m, seqs)
        cur = nll(m, seqs)
        assert cur <= prev + 1e-8
        prev = cur


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), eta=st.floats(1e-3, 1e3))
def test_rows_stay_stochastic(seed, eta):
    rng = np.random.default_rng(seed)
    m = random_gaussian_hmm(rng, 3, 2, 1)
    seqs = _data(rng, m, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = online_em_step(m, seqs, eta)
    np.testing.assert_allclose(out.transitions.sum(axis=1), 1.0, atol=1e-12)
    assert out.initial.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(out.transitions[m.s :], m.transitions[m.s :])


def test_unvisited_state_left_unchanged(rng):
    A = np.array([[0.5, 0.0, 0.5], [0.0, 0.5, 0.5], [0, 0, 1.0]])
    m = chain([1.0, 0, 0], A, [0.0, 3.0], 2)
    with pytest.warns(RuntimeWarning, match="state 1"):
        out = batch_em_step(m, [[[0.1], [0.2]]])
    np.testing.assert_array_equal(out.emissions[1], m.emissions[1])


# --- divergence --------------------------------------------------------------------------


def test_divergence_zero_on_diagonal(rng):
    m = random_gaussian_hmm(rng, 3, 1, 2)
    assert hmm_divergence(m, m) == pytest.approx(0.0, abs=1e-12)


def test_divergence_single_emission_change(rng):
    m = random_gaussian_hmm(rng, 3, 1, 1)
    E = m.emissions.copy()
    E[1] = gaussian_pack([0.7], [[2.0]])
    other = HmmModel(m.spec, m.initial, m.transitions, E, m.s)
    want = expected_usage(m)[1] * bregman_divergence(
        m.spec, NaturalParams(other.naturals[1]), NaturalParams(m.naturals[1])
    )
    assert hmm_divergence(m, other) == pytest.approx(want, rel=1e-12)


def test_divergence_support_mismatch_is_infinite():
    a = chain([1, 0], [[0.5, 0.5], [0, 1.0]], [0.0], 1)
    b = chain([1, 0], [[0.5, 0.5], [0, 1.0]], [0.0], 1)
    A = np.array([[0.5, 0.5, 0.0], [0, 1.0, 0], [0, 0, 1.0]])
    c = chain([1, 0, 0], A, [0.0], 1)
    d = chain([1, 0, 0], [[0.5, 0.25, 0.25], [0, 1.0, 0], [0, 0, 1.0]], [0.0], 1)
    assert hmm_divergence(a, b) == 0.0
    assert hmm_divergence(d, c) == math.inf


def _path_log_probs(m, seqs, paths):
    """Vectorised ``joint_log_prob`` over many complete paths."""
    starts = np.array([p[0] for p in paths])
    out = np.log(m.initial[starts])
    src = np.concatenate([p[:-1] for p in paths])
    dst = np.concatenate([p[1:] for p in paths])
    owner = np.repeat(np.arange(len(paths)), [len(p) - 1 for p in paths])
    out += np.bincount(owner, np.log(m.transitions[src, dst]), minlength=len(paths))
    X = np.concatenate(seqs)
    visits = np.concatenate([p[: len(x)] for x, p in zip(seqs, paths)])
    who = np.repeat(np.arange(len(seqs)), [len(x) for x in seqs])
    ld = np.column_stack([
        multivariate_normal(mu[:1], mu[1] - mu[0] ** 2).logpdf(X).reshape(-1) for mu in m.emissions
    ])
    out += np.bincount(who, ld[np.arange(len(X)), visits], minlength=len(seqs))
    return out


def test_divergence_monte_carlo(rng):
    a = random_gaussian_hmm(rng, 2, 1, 1)
    b = random_gaussian_hmm(rng, 2, 1, 1)
    seqs, paths = sample_sequences(a, 100_000, rng, max_len=10_000, return_states=True)
    x, p = seqs[0], paths[0]
    assert _path_log_probs(a, seqs[:1], paths[:1])[0] == pytest.approx(joint_log_prob(a, p, x), rel=1e-12)
    r = _path_log_probs(a, seqs, paths) - _path_log_probs(b, seqs, paths)
    se = r.std() / math.sqrt(len(r))
    assert abs(hmm_divergence(a, b) - r.mean()) < 3 * se
