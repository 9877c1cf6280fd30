"""Absorbing hidden Markov models with exponential-family emissions.

States ``0..s-1`` are transient and emit one observation per visit; states
``s..k-1`` are absorbing, emit nothing and end the sequence.  A sequence of
length ``T`` therefore corresponds to ``T`` transient visits followed by one
exit transition into an absorbing state.  The exit step is part of the
likelihood, of the posteriors (as ``exit_marginals``) and of the transition
update, which keeps the transition rows exactly stochastic and makes the
expected sequence length equal to the total expected usage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .errors import InvalidModelError, InvalidParameterError, NumericalError
from .expfam import ExpFamSpec, NaturalParams, bregman_divergence

__all__ = [
    "HmmModel",
    "HmmPosteriors",
    "forward_backward",
    "expected_usage",
    "online_em_step",
    "batch_em_step",
    "hmm_divergence",
    "em_upper_bound",
    "sample_sequences",
    "nll",
    "batch_statistics",
    "joint_log_prob",
    "random_model",
    "init_from_data",
]

DEAD_MASS = 1e-12
_SIMPLEX_TOL = 1e-9


def _spectral_radius_below_one(Q: np.ndarray, squarings: int = 64) -> bool:
    """Power iteration by repeated squaring: rho(Q) < 1 iff some ||Q^m|| < 1."""
    M = np.abs(Q)
    for _ in range(squarings):
        if M.size == 0 or np.abs(M).sum(axis=1).max() < 1.0:
            return True
        M = M @ M
        if not np.all(np.isfinite(M)):
            return False
    return bool(np.abs(M).sum(axis=1).max() < 1.0)


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Initial distribution, transition matrix and transient-state emissions."""

    spec: ExpFamSpec
    initial: np.ndarray
    transitions: np.ndarray
    emissions: np.ndarray
    transient_count: int

    def __post_init__(self):
        pi = np.array(self.initial, dtype=float).reshape(-1)
        A = np.array(self.transitions, dtype=float)
        k = len(pi)
        s = int(self.transient_count)
        E = np.array(self.emissions, dtype=float).reshape(s, -1)
        if A.shape != (k, k):
            raise ValueError(f"transitions must be {k}x{k}, got {A.shape}")
        if not 1 <= s < k:
            raise ValueError(f"need 1 <= transient_count < {k}, got {s}")
        if E.shape[1] != self.spec.dim_stat:
            raise ValueError("emission vectors do not match the family")
        if np.any(pi < 0) or abs(pi.sum() - 1) > _SIMPLEX_TOL:
            raise InvalidParameterError(f"initial distribution off the simplex: {pi}")
        if np.any(A < 0) or np.any(np.abs(A.sum(axis=1) - 1) > _SIMPLEX_TOL):
            bad = int(np.argmax(np.abs(A.sum(axis=1) - 1) + (A < 0).any(axis=1)))
            raise InvalidParameterError(f"transition row {bad} off the simplex")
        if not np.allclose(A[s:], np.eye(k)[s:], atol=1e-12, rtol=0):
            raise InvalidModelError("absorbing rows must map each state to itself")
        for h, mu in enumerate(E):
            self.spec.check_expectation(mu, f"emissions[{h}]")
        for arr in (pi, A, E):
            arr.setflags(write=False)
        object.__setattr__(self, "initial", pi)
        object.__setattr__(self, "transitions", A)
        object.__setattr__(self, "emissions", E)
        object.__setattr__(self, "transient_count", s)

    @property
    def k(self) -> int:
        return len(self.initial)

    @property
    def s(self) -> int:
        return self.transient_count

    @property
    def Q(self) -> np.ndarray:
        """Transient-to-transient block."""
        return self.transitions[: self.s, : self.s]

    @property
    def exit_probs(self) -> np.ndarray:
        """Probability of absorbing directly from each transient state."""
        return self.transitions[: self.s, self.s :].sum(axis=1)

    @cached_property
    def naturals(self) -> np.ndarray:
        return np.array([self.spec.inverse_link(mu) for mu in self.emissions])

    @cached_property
    def usage(self) -> np.ndarray:
        return expected_usage(self)


@dataclass(frozen=True)
class HmmPosteriors:
    """Posteriors for one sequence.

    ``state_marginals[t, h]`` is ``P(h_t = h | v)`` over all ``k`` states
    (absorbing columns are zero), ``pair_marginals[t, h, h']`` is
    ``P(h_t = h, h_{t+1} = h' | v)`` for ``t < T-1`` and ``exit_marginals[h, r]``
    is the probability that the last visited state is ``h`` and the chain is
    absorbed in ``r``.
    """

    state_marginals: np.ndarray
    pair_marginals: np.ndarray
    exit_marginals: np.ndarray
    log_likelihood: float


def _as_sequence(model: HmmModel, seq) -> np.ndarray:
    X = np.asarray(seq, dtype=float)
    if X.size == 0:
        return np.zeros((0, model.spec.obs_dim))
    return model.spec.as_batch(X)


def _emission_log_density(model: HmmModel, X: np.ndarray) -> np.ndarray:
    spec = model.spec
    stats = spec.suff_stat(X)
    G = np.array([spec.log_partition(th) for th in model.naturals])
    return stats @ model.naturals.T - G[None, :] + spec.log_base_measure(X)[:, None]


def _run_kernel(model: HmmModel, X: np.ndarray, want_pairs: bool):
    s = model.s
    log_b = _emission_log_density(model, X)
    if np.any(np.isnan(log_b)) or np.any(log_b == np.inf):
        t = int(np.flatnonzero(~np.isfinite(log_b).all(axis=1))[0])
        raise NumericalError(f"non-finite emission log-density at time {t}")
    gamma, xi_sum, pairs, loglik, status = kernels.hmm_forward_backward(
        log_b, model.initial[:s], model.Q, model.exit_probs, want_pairs
    )
    if status >= 0:
        where = "the exit step" if status == len(X) else f"time {status}"
        raise NumericalError(f"forward variables vanish at {where}")
    tau = model.exit_probs
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(tau > 0, gamma[-1] / tau, 0.0)
    exits = ratio[:, None] * model.transitions[:s, s:]
    return gamma, xi_sum, pairs, exits, loglik


def forward_backward(model: HmmModel, sequence) -> HmmPosteriors:
    """Exact state, pair and exit posteriors for one nonempty sequence."""
    X = _as_sequence(model, sequence)
    if len(X) == 0:
        raise ValueError("sequence is empty")
    k, s = model.k, model.s
    gamma, _, pairs, exits, loglik = _run_kernel(model, X, True)
    T = len(X)
    state = np.zeros((T, k))
    state[:, :s] = gamma
    pair = np.zeros((T - 1, k, k))
    pair[:, :s, :s] = pairs
    ex = np.zeros((k, k))
    ex[:s, s:] = exits
    return HmmPosteriors(state, pair, ex, loglik)


def _empty_log_likelihood(model: HmmModel) -> float:
    p = model.initial[model.s :].sum()
    if p <= 0:
        raise NumericalError("empty sequence has zero probability under the model")
    return float(np.log(p))


def sequence_log_likelihood(model: HmmModel, sequence) -> float:
    X = _as_sequence(model, sequence)
    if len(X) == 0:
        return _empty_log_likelihood(model)
    return _run_kernel(model, X, False)[4]


def nll(model: HmmModel, sequences: Sequence) -> float:
    """Mean negative log-likelihood per sequence."""
    if len(sequences) == 0:
        raise ValueError("no sequences given")
    return float(-np.mean([sequence_log_likelihood(model, x) for x in sequences]))


def expected_usage(model: HmmModel) -> np.ndarray:
    """Expected number of visits to each transient state before absorption."""
    Q = model.Q
    if not _spectral_radius_below_one(Q):
        raise InvalidModelError("transient block has spectral radius >= 1")
    I = np.eye(model.s)
    try:
        u = np.linalg.solve((I - Q).T, model.initial[: model.s])
    except np.linalg.LinAlgError as exc:
        raise InvalidModelError("I - Q is singular") from exc
    return np.maximum(u, 0.0)


@dataclass(frozen=True)
class HmmStatistics:
    """Expected complete-data counts averaged over a batch of sequences."""

    initial: np.ndarray  # (k,)
    transitions: np.ndarray  # (s, k), exits included
    occupancy: np.ndarray  # (s,)
    emissions: np.ndarray  # (s, dim_stat)
    log_likelihood: float  # summed over sequences


def batch_statistics(model: HmmModel, sequences: Sequence) -> HmmStatistics:
    if len(sequences) == 0:
        raise ValueError("no sequences given")
    k, s = model.k, model.s
    init = np.zeros(k)
    trans = np.zeros((s, k))
    occ = np.zeros(s)
    emis = np.zeros((s, model.spec.dim_stat))
    total = 0.0
    for n, seq in enumerate(sequences):
        X = _as_sequence(model, seq)
        if len(X) == 0:
            total += _empty_log_likelihood(model)
            init[s:] += model.initial[s:] / model.initial[s:].sum()
            continue
        try:
            gamma, xi_sum, _, exits, loglik = _run_kernel(model, X, False)
        except NumericalError as exc:
            raise NumericalError(f"sequence {n}: {exc}") from exc
        total += loglik
        init[:s] += gamma[0]
        trans[:, :s] += xi_sum
        trans[:, s:] += exits
        occ += gamma.sum(axis=0)
        emis += gamma.T @ model.spec.suff_stat(X)
    N = len(sequences)
    return HmmStatistics(init / N, trans / N, occ / N, emis / N, total)


def _update(model: HmmModel, stats: HmmStatistics, inv_eta: float, what: str) -> HmmModel:
    s = model.s
    pi = inv_eta * model.initial + stats.initial
    pi = pi / pi.sum()
    A = model.transitions.copy()
    E = model.emissions.copy()
    u = model.usage if inv_eta > 0 else np.zeros(s)
    for h in range(s):
        den = inv_eta * u[h] + stats.occupancy[h]
        if den < DEAD_MASS:
            warnings.warn(
                f"{what}: state {h} has no expected usage; left unchanged",
                RuntimeWarning,
                stacklevel=3,
            )
            continue
        row = (inv_eta * u[h] * model.transitions[h] + stats.transitions[h]) / den
        A[h] = row / row.sum()
        E[h] = model.spec.project_expectation(
            (inv_eta * u[h] * model.emissions[h] + stats.emissions[h]) / den
        )
    return HmmModel(model.spec, pi, A, E, s)


def online_em_step(model: HmmModel, sequences: Sequence, eta: float) -> HmmModel:
    """Online EM update on a batch of sequences with learning rate ``eta``.

    The inertia term weights each transient state by its expected usage, so
    the old transition rows and emissions act as ``u_h / eta`` pseudo-visits.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return _update(model, batch_statistics(model, sequences), 1.0 / eta, "online_em_step")


def batch_em_step(model: HmmModel, sequences: Sequence) -> HmmModel:
    """Baum-Welch iteration on the given sequences."""
    return _update(model, batch_statistics(model, sequences), 0.0, "batch_em_step")


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> float:
    """``sum p log(p/q)`` with ``0 log 0 = 0``; infinite on support mismatch."""
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def hmm_divergence(model_a: HmmModel, model_b: HmmModel) -> float:
    """Relative entropy between the path distributions of two absorbing HMMs."""
    if (model_a.k, model_a.s) != (model_b.k, model_b.s):
        raise ValueError("models have different state layouts")
    u = model_a.usage
    total = _xlogy_ratio(model_a.initial, model_b.initial)
    for h in range(model_a.s):
        if u[h] == 0:
            continue
        total += u[h] * _xlogy_ratio(model_a.transitions[h], model_b.transitions[h])
        total += u[h] * bregman_divergence(
            model_a.spec,
            NaturalParams(model_b.naturals[h]),
            NaturalParams(model_a.naturals[h]),
        )
    return float(total)


def em_upper_bound(model_at: HmmModel, model_tilde: HmmModel, sequences: Sequence) -> float:
    """EM upper bound on the nll of ``model_tilde`` with posteriors from ``model_at``.

    Returns ``-(1/N) sum_n E[log p(h, v_n | model_tilde)]``, the posterior
    entropy constant omitted.
    """
    st = batch_statistics(model_at, sequences)
    s = model_at.s

    def xlog(c, p):
        mask = c > 0
        if np.any(p[mask] <= 0):
            return -np.inf
        return float(np.sum(c[mask] * np.log(p[mask])))

    val = xlog(st.initial, model_tilde.initial)
    val += xlog(st.transitions, model_tilde.transitions[:s])
    G = np.array([model_tilde.spec.log_partition(th) for th in model_tilde.naturals])
    val += float(np.sum(st.emissions * model_tilde.naturals) - st.occupancy @ G)
    base = 0.0
    for seq in sequences:
        X = _as_sequence(model_at, seq)
        if len(X):
            base += model_at.spec.log_base_measure(X).sum()
    val += base / len(sequences)
    return float(-val)


def sample_sequences(
    model: HmmModel,
    count: int,
    rng: np.random.Generator,
    max_len: int,
    return_states: bool = False,
):
    """Run the chain from ``initial`` until absorption or ``max_len`` emissions.

    With ``return_states`` the hidden path is also returned; it ends with the
    absorbing state unless the sequence was cut at ``max_len``.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    s, k = model.s, model.k
    cum_init = np.cumsum(model.initial)
    cum_trans = np.cumsum(model.transitions, axis=1)
    paths: List[np.ndarray] = []
    all_visits: List[np.ndarray] = []
    for _ in range(count):
        h = min(int(np.searchsorted(cum_init, rng.random() * cum_init[-1], side="right")), k - 1)
        states = [h]
        while h < s and len(states) <= max_len:
            h = min(
                int(np.searchsorted(cum_trans[h], rng.random() * cum_trans[h, -1], side="right")),
                k - 1,
            )
            states.append(h)
        states = np.array(states)
        visits = states[states < s][:max_len]
        all_visits.append(visits)
        paths.append(states[: len(visits) + 1] if states[-1] >= s else visits)
    # emissions drawn state by state, after all paths
    flat = np.concatenate(all_visits) if all_visits else np.zeros(0, dtype=int)
    X = np.empty((len(flat), model.spec.obs_dim))
    for h in range(s):
        idx = np.flatnonzero(flat == h)
        if idx.size:
            X[idx] = model.spec.sampler(model.naturals[h], rng, idx.size)
    cuts = np.cumsum([len(v) for v in all_visits])[:-1]
    seqs = [np.ascontiguousarray(x) for x in np.split(X, cuts)] if count else []
    return (seqs, paths) if return_states else seqs


def joint_log_prob(model: HmmModel, states, sequence) -> float:
    """``log p(h, v)`` for a full path; a trailing absorbing state scores the exit."""
    states = np.asarray(states, dtype=int)
    X = _as_sequence(model, sequence)
    s = model.s
    lp = np.log(model.initial[states[0]])
    for a, b in zip(states[:-1], states[1:]):
        lp += np.log(model.transitions[a, b])
    visits = states[states < s]
    if len(visits):
        ld = _emission_log_density(model, X)
        lp += ld[np.arange(len(visits)), visits].sum()
    return float(lp)


def random_model(
    spec: ExpFamSpec,
    transient: int,
    absorbing: int,
    rng: np.random.Generator,
    exit_mass: float = 0.2,
    emission_scale: float = 3.0,
) -> HmmModel:
    """Random absorbing HMM for tests and synthetic experiments.

    Each transient row sends ``exit_mass`` (jittered) to the absorbing states;
    Gaussian emissions get well-separated random means and unit covariance.
    """
    s, k = transient, transient + absorbing
    pi = np.zeros(k)
    pi[:s] = rng.dirichlet(np.ones(s))
    A = np.zeros((k, k))
    for h in range(s):
        ex = float(np.clip(exit_mass * rng.uniform(0.5, 1.5), 1e-3, 0.95))
        A[h, :s] = (1 - ex) * rng.dirichlet(np.ones(s))
        A[h, s:] = ex * rng.dirichlet(np.ones(absorbing))
    A[s:, s:] = np.eye(absorbing)
    if spec.name == "gaussian":
        from .expfam import gaussian_pack

        d = spec.obs_dim
        E = [gaussian_pack(emission_scale * rng.standard_normal(d), np.eye(d)) for _ in range(s)]
    else:
        E = [np.array([rng.uniform(0.5, 10.0)]) for _ in range(s)]
    return HmmModel(spec, pi, A, np.array(E), s)


def init_from_data(
    spec: ExpFamSpec,
    sequences: Sequence,
    transient: int,
    absorbing: int,
    rng: np.random.Generator,
    mean_length: Optional[float] = None,
) -> HmmModel:
    """Data-driven starting point for EM.

    Uniform initial distribution over transient states, random transition
    rows whose exit mass matches the mean observed sequence length, and
    emissions jittered around the pooled data moments.
    """
    X = np.concatenate([np.asarray(x, dtype=float).reshape(-1, spec.obs_dim) for x in sequences if len(x)])
    if mean_length is None:
        mean_length = np.mean([len(x) for x in sequences])
    ex = float(np.clip(1.0 / max(mean_length, 1.0), 1e-3, 0.95))
    s, k = transient, transient + absorbing
    pi = np.zeros(k)
    pi[:s] = 1.0 / s
    A = np.zeros((k, k))
    for h in range(s):
        A[h, :s] = (1 - ex) * rng.dirichlet(np.full(s, 5.0))
        A[h, s:] = ex / absorbing
    A[s:, s:] = np.eye(absorbing)
    mean = X.mean(axis=0)
    std = np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
    if spec.name == "gaussian":
        from .expfam import gaussian_pack

        cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
        E = [
            spec.project_expectation(gaussian_pack(mean + std * rng.standard_normal(spec.obs_dim), cov))
            for _ in range(s)
        ]
    else:
        E = [np.maximum(mean + std * rng.standard_normal(spec.obs_dim), 1e-3) for _ in range(s)]
    return HmmModel(spec, pi, A, np.array(E), s)
