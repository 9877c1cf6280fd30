"""Shared oracles and builders for the test suite."""

import itertools
import math

import numpy as np
from scipy.stats import multivariate_normal


def random_spd(rng, d, scale=1.0):
    B = rng.standard_normal((d, d))
    return scale * (B @ B.T / d + 0.5 * np.eye(d))


def fd_gradient(f, x, h=1e-6):
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


def random_gaussian_mixture(rng, k, d, spread=2.0):
    from divem.expfam import gaussian_pack, make_gaussian_spec
    from divem.mixture import MixtureModel

    comps = [gaussian_pack(spread * rng.standard_normal(d), random_spd(rng, d)) for _ in range(k)]
    return MixtureModel(make_gaussian_spec(d), rng.dirichlet(np.full(k, 3.0)), np.array(comps))


def gaussian_to_free(mu, d):
    """(mean, lower Cholesky entries): a local chart on expectation vectors."""
    from divem.expfam import gaussian_unpack

    m, S = gaussian_unpack(mu, d)
    L = np.linalg.cholesky(S)
    return np.concatenate([m, L[np.tril_indices(d)]])


def gaussian_from_free(x, d):
    from divem.expfam import gaussian_pack

    L = np.zeros((d, d))
    L[np.tril_indices(d)] = x[d:]
    return gaussian_pack(x[:d], L @ L.T)


def mixture_to_free(model):
    d = model.spec.obs_dim
    parts = [np.log(model.weights)]
    parts += [gaussian_to_free(mu, d) for mu in model.components]
    return np.concatenate(parts)


def mixture_from_free(x, like):
    from divem.mixture import MixtureModel

    k, d = like.k, like.spec.obs_dim
    w = softmax(x[:k])
    step = d + d * (d + 1) // 2
    comps = [gaussian_from_free(x[k + h * step : k + (h + 1) * step], d) for h in range(k)]
    return MixtureModel(like.spec, w, np.array(comps))


def hmm_to_free(model):
    """Log-probabilities for pi and transient rows, chart for emissions."""
    s, d = model.s, model.spec.obs_dim
    with np.errstate(divide="ignore"):
        parts = [np.log(model.initial[:s])]
        parts += [np.log(model.transitions[h]) for h in range(s)]
    parts += [gaussian_to_free(mu, d) for mu in model.emissions]
    return np.concatenate(parts)


def hmm_from_free(x, like):
    """Inverse of :func:`hmm_to_free`; absorbing-state mass of pi stays zero."""
    from divem.hmm import HmmModel

    s, k, d = like.s, like.k, like.spec.obs_dim
    pi = np.zeros(k)
    pi[:s] = softmax(x[:s])
    A = like.transitions.copy()
    off = s
    for h in range(s):
        A[h] = softmax(x[off : off + k])
        off += k
    step = d + d * (d + 1) // 2
    E = [gaussian_from_free(x[off + h * step : off + (h + 1) * step], d) for h in range(s)]
    return HmmModel(like.spec, pi, A, np.array(E), s)


def random_gaussian_hmm(rng, s, r, d, exit_mass=0.3):
    from divem.expfam import gaussian_pack, make_gaussian_spec
    from divem.hmm import HmmModel

    k = s + r
    pi = np.zeros(k)
    pi[:s] = rng.dirichlet(np.ones(s) * 2)
    A = np.zeros((k, k))
    for h in range(s):
        ex = exit_mass * rng.uniform(0.5, 1.5)
        A[h, :s] = (1 - ex) * rng.dirichlet(np.ones(s) * 2)
        A[h, s:] = ex * rng.dirichlet(np.ones(r) * 2)
    A[s:, s:] = np.eye(r)
    E = [gaussian_pack(2 * rng.standard_normal(d), random_spd(rng, d)) for _ in range(s)]
    return HmmModel(make_gaussian_spec(d), pi, A, np.array(E), s)


KALMAN_NAMES = ("pi1", "V", "A", "C", "Qn", "Rn")
_KALMAN_SYM = {"V", "Qn", "Rn"}


def kalman_to_free(model):
    """Flatten a Kalman model; symmetric matrices contribute their upper triangle."""
    out = []
    for name in KALMAN_NAMES:
        M = getattr(model, name)
        out.append(M[np.triu_indices(len(M))] if name in _KALMAN_SYM else M.ravel())
    return np.concatenate(out)


def kalman_from_free(x, like):
    from divem.kalman import KalmanModel

    vals, i = {}, 0
    for name in KALMAN_NAMES:
        ref = getattr(like, name)
        if name in _KALMAN_SYM:
            k = len(ref) * (len(ref) + 1) // 2
            M = np.zeros_like(ref)
            M[np.triu_indices(len(ref))] = x[i : i + k]
            M = M + M.T - np.diag(np.diag(M))
        else:
            k = ref.size
            M = x[i : i + k].reshape(ref.shape)
        vals[name] = M
        i += k
    return KalmanModel(**vals)


def kalman_joint(model, T):
    """Mean and covariance of ``(h_1..h_T, v_1..v_T)`` built directly."""
    n, d = model.n, model.d
    means = [model.pi1]
    covs = [model.V]
    for _ in range(1, T):
        means.append(model.A @ means[-1])
        covs.append(model.A @ covs[-1] @ model.A.T + model.Qn)
    Chh = np.zeros((n * T, n * T))
    for t in range(T):
        for s in range(t, T):
            block = np.linalg.matrix_power(model.A, s - t) @ covs[t]
            Chh[s * n : (s + 1) * n, t * n : (t + 1) * n] = block
            Chh[t * n : (t + 1) * n, s * n : (s + 1) * n] = block.T
    Cbig = np.kron(np.eye(T), model.C)
    Chv = Chh @ Cbig.T
    Cvv = Cbig @ Chh @ Cbig.T + np.kron(np.eye(T), model.Rn)
    mh = np.concatenate(means)
    return mh, Cbig @ mh, Chh, Chv, Cvv


def enumerate_paths(model, X):
    """Brute-force posteriors: every transient path of length T plus every exit."""
    s, k = model.s, model.k
    T = len(X)
    dens = np.exp(
        [[emission_logpdf(model, h, x) for h in range(s)] for x in X]
    )
    state = np.zeros((T, k))
    pair = np.zeros((T - 1, k, k))
    exits = np.zeros((k, k))
    total = 0.0
    A = model.transitions
    for path in itertools.product(range(s), repeat=T):
        p = model.initial[path[0]] * dens[0, path[0]]
        for t in range(1, T):
            p *= A[path[t - 1], path[t]] * dens[t, path[t]]
        for r in range(s, k):
            q = p * A[path[-1], r]
            total += q
            exits[path[-1], r] += q
            for t in range(T):
                state[t, path[t]] += q
            for t in range(T - 1):
                pair[t, path[t], path[t + 1]] += q
    return state / total, pair / total, exits / total, math.log(total)


def emission_logpdf(model, h, x):
    spec = model.spec
    if spec.name == "poisson":
        lam = model.emissions[h][0]
        return x[0] * math.log(lam) - lam - math.lgamma(x[0] + 1)
    d = spec.obs_dim
    mean = model.emissions[h][:d]
    cov = model.emissions[h][d:].reshape(d, d) - np.outer(mean, mean)
    return multivariate_normal(mean, cov).logpdf(x)


def kalman_condition(model, y):
    """Posterior of all hidden states given one sequence, by direct conditioning."""
    T = len(y)
    mh, mv, Chh, Chv, Cvv = kalman_joint(model, T)
    K = np.linalg.solve(Cvv, Chv.T).T
    mean = mh + K @ (y.reshape(-1) - mv)
    cov = Chh - K @ Chv.T
    ll = multivariate_normal(mv, Cvv).logpdf(y.reshape(-1))
    return mean.reshape(T, model.n), cov, ll
