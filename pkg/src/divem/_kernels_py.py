"""Pure numpy implementations of the hot kernels.

Mirrors ``divem._ext`` function for function; used when the compiled
extension is unavailable or ``DIVEM_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np

# B_{2n} / (2n) for n = 1..9
_PSI_COEF = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
    43867.0 / 14364.0,
)
# B_{2n} for n = 1..9
_PSI1_COEF = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
)
_SHIFT = 6.0


def digamma(x):
    x = np.array(x, dtype=float, ndmin=1)
    out = np.zeros_like(x)
    bad = ~(x > 0)
    x = np.where(bad, 1.0, x)
    while True:
        low = x < _SHIFT
        if not low.any():
            break
        out[low] -= 1.0 / x[low]
        x = np.where(low, x + 1.0, x)
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_PSI_COEF):
        series = (series + c) * inv2
    out += np.log(x) - 0.5 / x - series
    out[bad] = np.nan
    return out


def trigamma(x):
    x = np.array(x, dtype=float, ndmin=1)
    out = np.zeros_like(x)
    bad = ~(x > 0)
    x = np.where(bad, 1.0, x)
    while True:
        low = x < _SHIFT
        if not low.any():
            break
        out[low] += 1.0 / (x[low] * x[low])
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for c in reversed(_PSI1_COEF):
        series = (series + c) * inv2
    out += inv + 0.5 * inv2 + series * inv
    out[bad] = np.nan
    return out


def hmm_forward_backward(log_b, pi, Q, tau, want_pairs):
    """Scaled forward-backward over transient states with an exit step.

    Returns ``(gamma, xi_sum, pairs, loglik, status)``; ``status`` is -1 on
    success, otherwise the time index at which every forward entry vanished
    (``T`` for the exit step).
    """
    log_b = np.asarray(log_b, dtype=float)
    T, s = log_b.shape
    off = log_b.max(axis=1)
    gamma = np.zeros((T, s))
    xi_sum = np.zeros((s, s))
    pairs = np.zeros((max(T - 1, 0), s, s)) if want_pairs else None
    for t in range(T):
        if not np.isfinite(off[t]):
            return gamma, xi_sum, pairs, -math.inf, t
    b = np.exp(log_b - off[:, None])
    alpha = np.empty((T, s))
    c = np.empty(T + 1)
    a = pi * b[0]
    for t in range(T):
        if t > 0:
            a = (alpha[t - 1] @ Q) * b[t]
        ct = a.sum()
        if not (ct > 0 and math.isfinite(ct)):
            return gamma, xi_sum, pairs, -math.inf, t
        alpha[t] = a / ct
        c[t] = ct
    cT = float(alpha[T - 1] @ tau)
    if not (cT > 0 and math.isfinite(cT)):
        return gamma, xi_sum, pairs, -math.inf, T
    c[T] = cT
    beta = np.empty((T, s))
    beta[T - 1] = tau / cT
    for t in range(T - 2, -1, -1):
        wb = b[t + 1] * beta[t + 1]
        beta[t] = (Q @ wb) / c[t + 1]
        xi = alpha[t][:, None] * Q * wb[None, :] / c[t + 1]
        xi_sum += xi
        if want_pairs:
            pairs[t] = xi
    gamma = alpha * beta
    loglik = float(np.log(c).sum() + off.sum())
    return gamma, xi_sum, pairs, loglik, -1
