"""Linear-Gaussian state-space models: smoothing, divergence and online EM.

Model::

    h_1 ~ N(pi1, V),   h_{t+1} = A h_t + rho_t,   v_t = C h_t + eps_t,
    rho_t ~ N(0, Qn),  eps_t ~ N(0, Rn).

``Qn``/``Rn`` are the process and observation noise covariances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import InvalidParameterError, NumericalError

__all__ = [
    "KalmanModel",
    "SmoothedMoments",
    "smooth",
    "prior_moments",
    "log_det_divergence",
    "kalman_divergence",
    "em_upper_bound",
    "online_em_step",
    "batch_em_step",
    "nll",
    "sample_sequences",
    "random_model",
    "PARAMETERS",
]

PARAMETERS = ("pi1", "V", "A", "C", "Q", "R")
_MIN_EIG = 1e-10
_LOG2PI = math.log(2.0 * math.pi)


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def _check_spd(X: np.ndarray, name: str, exc=InvalidParameterError) -> np.ndarray:
    X = _sym(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise exc(f"{name} has non-finite entries")
    eig = np.linalg.eigvalsh(X)
    if eig[0] < _MIN_EIG:
        raise exc(f"{name} is not positive definite (min eigenvalue {eig[0]:.3g})")
    return X


@dataclass(frozen=True, eq=False)
class KalmanModel:
    pi1: np.ndarray
    V: np.ndarray
    A: np.ndarray
    C: np.ndarray
    Qn: np.ndarray
    Rn: np.ndarray

    def __post_init__(self):
        pi1 = np.array(self.pi1, dtype=float).reshape(-1)
        n = len(pi1)
        A = np.array(self.A, dtype=float).reshape(n, n)
        C = np.atleast_2d(np.array(self.C, dtype=float))
        if C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got shape {C.shape}")
        d = C.shape[0]
        V = _check_spd(np.reshape(self.V, (n, n)), "V")
        Qn = _check_spd(np.reshape(self.Qn, (n, n)), "Qn")
        Rn = _check_spd(np.reshape(self.Rn, (d, d)), "Rn")
        for name, val in zip(("pi1", "V", "A", "C", "Qn", "Rn"), (pi1, V, A, C, Qn, Rn)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return len(self.pi1)

    @property
    def d(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class SmoothedMoments:
    """Posterior moments of one sequence.

    ``P_pair[t]`` holds ``E[h_{t+1} h_t^T | v]`` (0-based), so it has ``T - 1``
    entries.
    """

    h_hat: np.ndarray
    P: np.ndarray
    P_pair: np.ndarray
    cov: np.ndarray
    log_likelihood: float


def _as_sequence(model: KalmanModel, seq) -> np.ndarray:
    Y = np.asarray(seq, dtype=float)
    if Y.ndim == 1 and model.d == 1:
        Y = Y.reshape(-1, 1)
    if Y.ndim != 2 or Y.shape[1] != model.d:
        raise ValueError(f"sequence must have shape (T, {model.d}), got {Y.shape}")
    if len(Y) == 0:
        raise ValueError("sequence is empty")
    return Y


def _filter(model: KalmanModel, Y: np.ndarray):
    """Filter ``N`` equal-length sequences at once; ``Y`` has shape ``(N, T, d)``.

    The covariance recursion does not depend on the data, so it runs once
    and the covariances come back with shape ``(T, n, n)``.
    """
    N, T, _ = Y.shape
    n = model.n
    A, C, Qn, Rn = model.A, model.C, model.Qn, model.Rn
    mu_p = np.empty((N, T, n))
    S_p = np.empty((T, n, n))
    mu_f = np.empty((N, T, n))
    S_f = np.empty((T, n, n))
    loglik = np.zeros(N)
    m = np.broadcast_to(model.pi1, (N, n))
    S = model.V
    I = np.eye(n)
    for t in range(T):
        mu_p[:, t], S_p[t] = m, S
        Sy = _sym(C @ S @ C.T + Rn)
        try:
            cf = cho_factor(Sy, lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"innovation covariance not SPD at time {t}") from exc
        resid = Y[:, t] - m @ C.T
        K = cho_solve(cf, C @ S).T
        m = m + resid @ K.T
        IKC = I - K @ C
        S = _sym(IKC @ S @ IKC.T + K @ Rn @ K.T)
        mu_f[:, t], S_f[t] = m, S
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        maha = np.einsum("ij,ji->i", resid, cho_solve(cf, resid.T))
        loglik -= 0.5 * (maha + logdet + model.d * _LOG2PI)
        m = m @ A.T
        S = _sym(A @ S @ A.T + Qn)
    return mu_p, S_p, mu_f, S_f, loglik


def _smooth(model: KalmanModel, Y: np.ndarray):
    """RTS pass for a ``(N, T, d)`` block: smoothed means, shared covariances."""
    N, T, _ = Y.shape
    n = model.n
    mu_p, S_p, mu_f, S_f, loglik = _filter(model, Y)
    mu_s = mu_f.copy()
    S_s = S_f.copy()
    cross = np.empty((max(T - 1, 0), n, n))
    for t in range(T - 2, -1, -1):
        try:
            cf = cho_factor(S_p[t + 1], lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"predicted covariance not SPD at time {t + 1}") from exc
        J = cho_solve(cf, model.A @ S_f[t]).T
        mu_s[:, t] = mu_f[:, t] + (mu_s[:, t + 1] - mu_p[:, t + 1]) @ J.T
        S_s[t] = _sym(S_f[t] + J @ (S_s[t + 1] - S_p[t + 1]) @ J.T)
        cross[t] = S_s[t + 1] @ J.T
    return mu_s, S_s, cross, loglik


def smooth(model: KalmanModel, sequence) -> SmoothedMoments:
    """Kalman filter followed by the Rauch-Tung-Striebel backward pass."""
    Y = _as_sequence(model, sequence)
    mu_s, S_s, cross, loglik = _smooth(model, Y[None])
    mu_s = mu_s[0]
    P = S_s + mu_s[:, :, None] * mu_s[:, None, :]
    P_pair = cross + mu_s[1:, :, None] * mu_s[:-1, None, :]
    return SmoothedMoments(mu_s, P, P_pair, S_s, float(loglik[0]))


def _by_length(model: KalmanModel, sequences):
    """Group sequences into ``(N_T, T, d)`` blocks of equal length."""
    groups = {}
    for y in sequences:
        Y = _as_sequence(model, y)
        groups.setdefault(len(Y), []).append(Y)
    return [np.stack(g) for _, g in sorted(groups.items())]


def nll(model: KalmanModel, sequences) -> float:
    """Mean negative log marginal likelihood per sequence."""
    blocks = _by_length(model, sequences)
    if not blocks:
        raise ValueError("no sequences given")
    total = sum(float(_filter(model, B)[4].sum()) for B in blocks)
    return -total / sum(len(B) for B in blocks)


def prior_moments(model: KalmanModel, T: int) -> np.ndarray:
    """Prior second moments ``U_t = E[h_t h_t^T]`` for ``t = 1..T``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    U = np.empty((T, model.n, model.n))
    U[0] = model.V + np.outer(model.pi1, model.pi1)
    for t in range(1, T):
        U[t] = _sym(model.Qn + model.A @ U[t - 1] @ model.A.T)
    return U


def log_det_divergence(X, Y) -> float:
    """``tr(X Y^-1) - log det(X Y^-1) - d`` for SPD ``X``, ``Y``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape != Y.shape or X.shape[0] != X.shape[1]:
        raise ValueError(f"shape mismatch: {X.shape} vs {Y.shape}")
    try:
        cx = cho_factor(_sym(X), lower=True)
        cy = cho_factor(_sym(Y), lower=True)
    except LinAlgError as exc:
        raise ValueError("log_det_divergence needs SPD arguments") from exc
    d = X.shape[0]
    tr = float(np.trace(cho_solve(cy, X)))
    logdet = 2.0 * (np.sum(np.log(np.diag(cx[0]))) - np.sum(np.log(np.diag(cy[0]))))
    return max(tr - logdet - d, 0.0)


def _mahal_trace(M: np.ndarray, D: np.ndarray, W: np.ndarray) -> float:
    """``tr(M^-1 D W D^T)`` with SPD ``M``."""
    return float(np.trace(cho_solve(cho_factor(M, lower=True), D @ W @ D.T)))


def kalman_divergence(model_a: KalmanModel, model_b: KalmanModel, T: int) -> float:
    """Relative entropy between the joints over ``T`` steps of hidden and observed values."""
    if (model_a.n, model_a.d) != (model_b.n, model_b.d):
        raise ValueError("models have different dimensions")
    if T < 1:
        raise ValueError("T must be at least 1")
    U = prior_moments(model_a, T)
    dpi = model_a.pi1 - model_b.pi1
    val = _mahal_trace(model_b.V, dpi[:, None], np.eye(1))
    val += log_det_divergence(model_a.V, model_b.V)
    if T > 1:
        val += _mahal_trace(model_b.Qn, model_a.A - model_b.A, U[: T - 1].sum(axis=0))
        val += (T - 1) * log_det_divergence(model_a.Qn, model_b.Qn)
    val += _mahal_trace(model_b.Rn, model_a.C - model_b.C, U.sum(axis=0))
    val += T * log_det_divergence(model_a.Rn, model_b.Rn)
    return 0.5 * val


@dataclass(frozen=True)
class KalmanStatistics:
    """Posterior moments averaged over a batch of equal-length sequences."""

    h1: np.ndarray  # mean of h_hat_1
    P: np.ndarray  # (T, n, n)
    P_pair: np.ndarray  # (T-1, n, n), E[h_{t+1} h_t^T]
    vh: np.ndarray  # (T, d, n), E[v_t h_t^T]
    vv: np.ndarray  # (T, d, d)
    T: int
    log_likelihood: float  # summed over sequences


def batch_statistics(model: KalmanModel, sequences) -> KalmanStatistics:
    seqs = [_as_sequence(model, y) for y in sequences]
    if not seqs:
        raise ValueError("no sequences given")
    T = len(seqs[0])
    if any(len(y) != T for y in seqs):
        raise ValueError("all sequences in a batch must have the same length")
    Y = np.stack(seqs)
    N = len(seqs)
    mu_s, S_s, cross, ll = _smooth(model, Y)
    h1 = mu_s[:, 0].sum(axis=0)
    P = N * S_s + np.einsum("kti,ktj->tij", mu_s, mu_s)
    Pp = N * cross + np.einsum("kti,ktj->tij", mu_s[:, 1:], mu_s[:, :-1])
    vh = np.einsum("kti,ktj->tij", Y, mu_s)
    vv = np.einsum("kti,ktj->tij", Y, Y)
    ll = float(ll.sum())
    return KalmanStatistics(h1 / N, P / N, Pp / N, vh / N, vv / N, T, ll)


def _normalise_mask(update_mask) -> frozenset:
    if update_mask is None:
        return frozenset(PARAMETERS)
    if isinstance(update_mask, dict):
        mask = frozenset(k for k, v in update_mask.items() if v)
    else:
        mask = frozenset(update_mask)
    unknown = mask - set(PARAMETERS)
    if unknown:
        raise ValueError(f"unknown parameters in update mask: {sorted(unknown)}")
    return mask


def _solve_right(M: np.ndarray, S: np.ndarray, what: str) -> np.ndarray:
    """``M S^-1`` for symmetric positive definite ``S``."""
    try:
        return cho_solve(cho_factor(_sym(S), lower=True), M.T).T
    except LinAlgError as exc:
        raise NumericalError(f"singular moment matrix in the {what} update") from exc


def _update(model: KalmanModel, st: KalmanStatistics, inv: float, mask) -> KalmanModel:
    T = st.T
    if T < 2:
        raise ValueError("online updates need sequences of length >= 2")
    U = prior_moments(model, T) if inv > 0 else np.zeros((T, model.n, model.n))
    A, C = model.A, model.C

    if "A" in mask:
        S = (inv * U[: T - 1] + st.P[: T - 1]).sum(axis=0)
        M = inv * A @ U[: T - 1].sum(axis=0) + st.P_pair.sum(axis=0)
        A_new = _solve_right(M, S, "A")
    else:
        A_new = A
    if "C" in mask:
        S = (inv * U + st.P).sum(axis=0)
        M = inv * C @ U.sum(axis=0) + st.vh.sum(axis=0)
        C_new = _solve_right(M, S, "C")
    else:
        C_new = C

    if "Q" in mask:
        dA = A - A_new
        dAU = sum(dA @ U[t] @ dA.T for t in range(T - 1)) / (T - 1)
        Qhat = np.zeros_like(model.Qn)
        for t in range(1, T):
            Pp = st.P_pair[t - 1]
            Qhat += st.P[t] - A_new @ Pp.T - Pp @ A_new.T + A_new @ st.P[t - 1] @ A_new.T
        Q_new = (inv * (model.Qn + dAU) + Qhat / (T - 1)) / (inv + 1.0)
        Q_new = _check_spd(Q_new, "updated Qn", NumericalError)
    else:
        Q_new = model.Qn
    if "R" in mask:
        dC = C - C_new
        dCU = sum(dC @ U[t] @ dC.T for t in range(T)) / T
        Rhat = np.zeros_like(model.Rn)
        for t in range(T):
            vh = st.vh[t]
            Rhat += st.vv[t] - C_new @ vh.T - vh @ C_new.T + C_new @ st.P[t] @ C_new.T
        R_new = (inv * (model.Rn + dCU) + Rhat / T) / (inv + 1.0)
        R_new = _check_spd(R_new, "updated Rn", NumericalError)
    else:
        R_new = model.Rn

    pi = model.pi1
    pi_new = (inv * pi + st.h1) / (inv + 1.0) if "pi1" in mask else pi
    if "V" in mask:
        Vhat = (
            st.P[0]
            - np.outer(pi_new, st.h1)
            - np.outer(st.h1, pi_new)
            + np.outer(pi_new, pi_new)
        )
        dpi = pi - pi_new
        V_new = (inv * (model.V + np.outer(dpi, dpi)) + Vhat) / (inv + 1.0)
        V_new = _check_spd(V_new, "updated V", NumericalError)
    else:
        V_new = model.V
    return KalmanModel(pi_new, V_new, A_new, C_new, Q_new, R_new)


def online_em_step(model: KalmanModel, sequences, eta: float, update_mask=None) -> KalmanModel:
    """Online EM update from a mini-batch of equal-length sequences.

    ``update_mask`` names the parameters to learn (any of ``PARAMETERS``; a
    dict of flags is also accepted).  Parameters left out are passed through
    unchanged.  The transition and observation matrices are solved first,
    the noise covariances next, and the initial-state moments last, since the
    later quantities depend on the earlier ones.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return _update(model, batch_statistics(model, sequences), 1.0 / eta, _normalise_mask(update_mask))


def batch_em_step(model: KalmanModel, sequences, update_mask=None) -> KalmanModel:
    """Classical EM iteration for the linear dynamical system."""
    return _update(model, batch_statistics(model, sequences), 0.0, _normalise_mask(update_mask))


def _trace_logdet_term(M: np.ndarray, S: np.ndarray, count: float) -> float:
    """``tr(M^-1 S) + count * log|M|`` for SPD ``M``; infinite if ``M`` is not SPD."""
    try:
        cf = cho_factor(_sym(M), lower=True)
    except (LinAlgError, ValueError):
        return math.inf
    return float(np.trace(cho_solve(cf, S)) + count * 2.0 * np.sum(np.log(np.diag(cf[0]))))


def em_upper_bound(model_at: KalmanModel, model_tilde: KalmanModel, sequences) -> float:
    """Expected complete-data nll of ``model_tilde`` under posteriors from ``model_at``.

    Averaged over the sequences, Gaussian normalising constants included, the
    posterior entropy omitted.
    """
    st = batch_statistics(model_at, sequences)
    return _upper_bound_from_stats(st, model_tilde)


def _upper_bound_from_stats(st: KalmanStatistics, m: KalmanModel) -> float:
    T = st.T
    pi, A, C = m.pi1, m.A, m.C
    Vhat = st.P[0] - np.outer(pi, st.h1) - np.outer(st.h1, pi) + np.outer(pi, pi)
    val = _trace_logdet_term(m.V, Vhat, 1.0)
    Qhat = np.zeros((m.n, m.n))
    for t in range(1, T):
        Pp = st.P_pair[t - 1]
        Qhat += st.P[t] - A @ Pp.T - Pp @ A.T + A @ st.P[t - 1] @ A.T
    if T > 1:
        val += _trace_logdet_term(m.Qn, Qhat, T - 1)
    Rhat = np.zeros((m.d, m.d))
    for t in range(T):
        vh = st.vh[t]
        Rhat += st.vv[t] - C @ vh.T - vh @ C.T + C @ st.P[t] @ C.T
    val += _trace_logdet_term(m.Rn, Rhat, T)
    val += T * (m.n + m.d) * _LOG2PI
    return 0.5 * val


def sample_sequences(
    model: KalmanModel, count: int, T: int, rng: np.random.Generator, return_states=False
):
    """Ancestral sampling of ``count`` trajectories of length ``T``.

    Returns an array of shape ``(count, T, d)`` (and the hidden states of
    shape ``(count, T, n)`` when requested).
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    n, d = model.n, model.d
    LV = np.linalg.cholesky(model.V)
    LQ = np.linalg.cholesky(model.Qn)
    LR = np.linalg.cholesky(model.Rn)
    H = np.empty((count, T, n))
    Y = np.empty((count, T, d))
    h = model.pi1 + rng.standard_normal((count, n)) @ LV.T
    for t in range(T):
        if t > 0:
            h = h @ model.A.T + rng.standard_normal((count, n)) @ LQ.T
        H[:, t] = h
        Y[:, t] = h @ model.C.T + rng.standard_normal((count, d)) @ LR.T
    return (Y, H) if return_states else Y


def random_model(
    n: int,
    d: int,
    rng: np.random.Generator,
    spectral_radius: float = 0.9,
    noise: float = 0.5,
) -> KalmanModel:
    """Random stable system with SPD covariances, for tests and synthetic data."""

    def spd(m):
        B = rng.standard_normal((m, m))
        return noise * (B @ B.T / m + 0.5 * np.eye(m))

    A = rng.standard_normal((n, n))
    A *= spectral_radius / max(np.abs(np.linalg.eigvals(A)))
    C = rng.standard_normal((d, n))
    return KalmanModel(rng.standard_normal(n), spd(n), A, C, spd(n), spd(d))


def with_params(model: KalmanModel, **kw) -> KalmanModel:
    """Copy of ``model`` with some parameters replaced."""
    return replace(model, **kw)
