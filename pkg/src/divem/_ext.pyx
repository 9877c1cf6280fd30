# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: digamma/trigamma and the scaled HMM forward-backward pass.

Function signatures and return conventions match ``divem._kernels_py``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, isfinite, INFINITY, NAN

cnp.import_array()

cdef double SHIFT = 6.0


cdef inline double _digamma(double x) nogil:
    cdef double acc = 0.0, inv2, s
    if not (x > 0):
        return NAN
    while x < SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    s = (43867.0 / 14364.0) * inv2
    s = (s - 3617.0 / 8160.0) * inv2
    s = (s + 1.0 / 12.0) * inv2
    s = (s - 691.0 / 32760.0) * inv2
    s = (s + 1.0 / 132.0) * inv2
    s = (s - 1.0 / 240.0) * inv2
    s = (s + 1.0 / 252.0) * inv2
    s = (s - 1.0 / 120.0) * inv2
    s = (s + 1.0 / 12.0) * inv2
    return acc + log(x) - 0.5 / x - s


cdef inline double _trigamma(double x) nogil:
    cdef double acc = 0.0, inv, inv2, s
    if not (x > 0):
        return NAN
    while x < SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    s = (43867.0 / 798.0) * inv2
    s = (s - 3617.0 / 510.0) * inv2
    s = (s + 7.0 / 6.0) * inv2
    s = (s - 691.0 / 2730.0) * inv2
    s = (s + 5.0 / 66.0) * inv2
    s = (s - 1.0 / 30.0) * inv2
    s = (s + 1.0 / 42.0) * inv2
    s = (s - 1.0 / 30.0) * inv2
    s = (s + 1.0 / 6.0) * inv2
    return acc + inv + 0.5 * inv2 + s * inv


def digamma(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xs = np.array(x, dtype=np.float64, ndmin=1).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(xs)
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        out[i] = _digamma(xs[i])
    return out.reshape(np.shape(np.array(x, ndmin=1)))


def trigamma(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xs = np.array(x, dtype=np.float64, ndmin=1).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(xs)
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        out[i] = _trigamma(xs[i])
    return out.reshape(np.shape(np.array(x, ndmin=1)))


def hmm_forward_backward(log_b_in, pi_in, Q_in, tau_in, bint want_pairs):
    cdef const double[:, ::1] log_b = np.ascontiguousarray(log_b_in, dtype=np.float64)
    cdef const double[::1] pi = np.ascontiguousarray(pi_in, dtype=np.float64)
    cdef const double[:, ::1] Q = np.ascontiguousarray(Q_in, dtype=np.float64)
    cdef const double[::1] tau = np.ascontiguousarray(tau_in, dtype=np.float64)
    cdef Py_ssize_t T = log_b.shape[0], s = log_b.shape[1]
    cdef Py_ssize_t t, h, g
    cdef double m, ct, acc, loglik = 0.0

    gamma_a = np.zeros((T, s))
    xi_a = np.zeros((s, s))
    pairs_a = np.zeros((T - 1 if T > 1 else 0, s, s)) if want_pairs else None
    cdef double[:, ::1] gamma = gamma_a
    cdef double[:, ::1] xi_sum = xi_a
    cdef double[:, :, ::1] pairs
    if want_pairs:
        pairs = pairs_a

    b_a = np.empty((T, s))
    alpha_a = np.empty((T, s))
    beta_a = np.empty((T, s))
    c_a = np.empty(T + 1)
    wb_a = np.empty(s)
    cdef double[:, ::1] b = b_a
    cdef double[:, ::1] alpha = alpha_a
    cdef double[:, ::1] beta = beta_a
    cdef double[::1] c = c_a
    cdef double[::1] wb = wb_a
    cdef double x

    for t in range(T):
        m = -INFINITY
        for h in range(s):
            if log_b[t, h] > m:
                m = log_b[t, h]
        if not isfinite(m):
            return gamma_a, xi_a, pairs_a, -INFINITY, t
        loglik += m
        for h in range(s):
            b[t, h] = exp(log_b[t, h] - m)

    for t in range(T):
        ct = 0.0
        for g in range(s):
            if t == 0:
                acc = pi[g]
            else:
                acc = 0.0
                for h in range(s):
                    acc += alpha[t - 1, h] * Q[h, g]
            acc *= b[t, g]
            alpha[t, g] = acc
            ct += acc
        if not (ct > 0 and isfinite(ct)):
            return gamma_a, xi_a, pairs_a, -INFINITY, t
        for g in range(s):
            alpha[t, g] /= ct
        c[t] = ct
        loglik += log(ct)

    ct = 0.0
    for h in range(s):
        ct += alpha[T - 1, h] * tau[h]
    if not (ct > 0 and isfinite(ct)):
        return gamma_a, xi_a, pairs_a, -INFINITY, T
    c[T] = ct
    loglik += log(ct)

    for h in range(s):
        beta[T - 1, h] = tau[h] / ct
    for t in range(T - 2, -1, -1):
        for g in range(s):
            wb[g] = b[t + 1, g] * beta[t + 1, g]
        for h in range(s):
            acc = 0.0
            for g in range(s):
                x = Q[h, g] * wb[g]
                acc += x
                x = alpha[t, h] * x / c[t + 1]
                xi_sum[h, g] += x
                if want_pairs:
                    pairs[t, h, g] = x
            beta[t, h] = acc / c[t + 1]

    for t in range(T):
        for h in range(s):
            gamma[t, h] = alpha[t, h] * beta[t, h]
    return gamma_a, xi_a, pairs_a, loglik, -1
