"""Batch and online EM for k-mixtures of an exponential family."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParameterError, NumericalError
from .expfam import ExpFamSpec, ExpectationParams, NaturalParams, bregman_divergence

__all__ = [
    "MixtureModel",
    "MixturePosterior",
    "posterior",
    "nll",
    "online_em_step",
    "batch_em_step",
    "mixture_divergence",
    "stochastic_approximation_step",
    "em_upper_bound",
    "batch_statistics",
    "sample",
    "init_from_data",
]

#: Denominators below this leave the component unchanged.
DEAD_MASS = 1e-12


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Mixture weights ``omega`` plus one expectation vector per component."""

    spec: ExpFamSpec
    weights: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        comps = np.array(self.components, dtype=float).reshape(len(w), -1)
        if comps.shape[1] != self.spec.dim_stat:
            raise ValueError(
                f"components have {comps.shape[1]} coordinates, "
                f"family needs {self.spec.dim_stat}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidParameterError(f"weights must lie on the simplex, got {w}")
        for h, mu in enumerate(comps):
            self.spec.check_expectation(mu, f"components[{h}]")
        w.setflags(write=False)
        comps.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def k(self) -> int:
        return len(self.weights)

    @cached_property
    def naturals(self) -> np.ndarray:
        return np.array([self.spec.inverse_link(mu) for mu in self.components])

    def component(self, h: int) -> ExpectationParams:
        return ExpectationParams(self.components[h])


@dataclass(frozen=True)
class MixturePosterior:
    """Responsibilities ``gamma[n, h] = P(h | v_n)``."""

    gamma: np.ndarray


def _component_log_density(model: MixtureModel, X: np.ndarray) -> np.ndarray:
    spec = model.spec
    stats = spec.suff_stat(X)
    G = np.array([spec.log_partition(th) for th in model.naturals])
    return stats @ model.naturals.T - G[None, :] + spec.log_base_measure(X)[:, None]


def log_joint(model: MixtureModel, batch) -> np.ndarray:
    """``log omega_h + log p(v_n | theta_h)`` as an ``(N, k)`` array."""
    X = model.spec.as_batch(batch)
    if len(X) == 0:
        raise ValueError("batch is empty")
    with np.errstate(divide="ignore", invalid="ignore"):
        lj = np.log(model.weights)[None, :] + _component_log_density(model, X)
    rows_ok = np.any(np.isfinite(lj), axis=1) & ~np.any(np.isnan(lj) | (lj == np.inf), axis=1)
    if not rows_ok.all():
        n = int(np.flatnonzero(~rows_ok)[0])
        raise NumericalError(f"non-finite log-density at observation {n}")
    return lj


def posterior(model: MixtureModel, batch) -> MixturePosterior:
    lj = log_joint(model, batch)
    return MixturePosterior(np.exp(lj - logsumexp(lj, axis=1, keepdims=True)))


def nll(model: MixtureModel, batch) -> float:
    """Mean negative log-likelihood of the batch."""
    return float(-np.mean(logsumexp(log_joint(model, batch), axis=1)))


def batch_statistics(model: MixtureModel, batch):
    """Averaged responsibilities and responsibility-weighted statistics.

    Returns ``(s0, s1)`` with ``s0[h] = mean_n gamma[n,h]`` and
    ``s1[h] = mean_n gamma[n,h] phi(v_n)``.
    """
    X = model.spec.as_batch(batch)
    gamma = posterior(model, X).gamma
    N = len(X)
    return gamma.sum(axis=0) / N, gamma.T @ model.spec.suff_stat(X) / N


def from_statistics(
    model: MixtureModel, mass: np.ndarray, weighted: np.ndarray, what: str
) -> MixtureModel:
    """New model with ``omega ~ mass`` and ``mu_h = weighted[h] / mass[h]``.

    Components whose mass is below ``DEAD_MASS`` keep their previous value.
    """
    spec = model.spec
    comps = model.components.copy()
    for h in range(model.k):
        if mass[h] < DEAD_MASS:
            warnings.warn(
                f"{what}: component {h} has no mass; left unchanged",
                RuntimeWarning,
                stacklevel=3,
            )
            continue
        comps[h] = spec.project_expectation(weighted[h] / mass[h])
    w = np.maximum(mass, 0.0)
    return MixtureModel(spec, w / w.sum(), comps)


def online_em_step(model: MixtureModel, batch, eta: float) -> MixtureModel:
    """One online EM update with learning rate ``eta``.

    Minimises the batch EM upper bound plus ``1/eta`` times the relative
    entropy to the current model; large ``eta`` approaches a batch M-step on
    the mini-batch, small ``eta`` keeps the model in place.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    s0, s1 = batch_statistics(model, batch)
    inv = 1.0 / eta
    w = model.weights
    mass = inv * w + s0
    weighted = inv * w[:, None] * model.components + s1
    # mass sums to 1/eta + 1, so normalising it reproduces the weight update
    return from_statistics(model, mass, weighted, "online_em_step")


def batch_em_step(model: MixtureModel, batch) -> MixtureModel:
    """Classical EM iteration on ``batch``."""
    s0, s1 = batch_statistics(model, batch)
    return from_statistics(model, s0, s1, "batch_em_step")


def em_upper_bound(model_at: MixtureModel, model_tilde: MixtureModel, batch) -> float:
    """EM upper bound on the nll of ``model_tilde``, formed at ``model_at``.

    Equals ``-(1/N) sum_n E_{h|v_n, model_at}[log p(h, v_n | model_tilde)]``;
    the posterior entropy constant is omitted.
    """
    gamma = posterior(model_at, batch).gamma
    lj = log_joint(model_tilde, batch)
    return float(-np.sum(gamma * np.where(gamma > 0, lj, 0.0)) / len(gamma))


def mixture_divergence(model_a: MixtureModel, model_b: MixtureModel) -> float:
    """Relative entropy between the joints ``p(h, v | a)`` and ``p(h, v | b)``."""
    if model_a.k != model_b.k:
        raise ValueError(f"component counts differ: {model_a.k} vs {model_b.k}")
    if model_a.spec.dim_stat != model_b.spec.dim_stat:
        raise ValueError("models use different families")
    wa, wb = model_a.weights, model_b.weights
    total = 0.0
    for h in range(model_a.k):
        if wa[h] == 0:
            continue
        if wb[h] == 0:
            return float("inf")
        total += wa[h] * np.log(wa[h] / wb[h])
        total += wa[h] * bregman_divergence(
            model_a.spec,
            NaturalParams(model_b.naturals[h]),
            NaturalParams(model_a.naturals[h]),
        )
    return float(total)


def stochastic_approximation_step(model: MixtureModel, batch, eta_t: float) -> MixtureModel:
    """Stochastic approximation of the complete-data sufficient statistics.

    Independent reference update: the running statistics
    ``s = (omega_h, omega_h mu_h)`` move towards the batch statistics by a
    step ``eta_t``, then the M-step maps them back to parameters.  Kept only
    as a test oracle for the online EM update.
    """
    if not 0.0 < eta_t < 1.0:
        raise ValueError(f"eta_t must lie in (0, 1), got {eta_t}")
    spec = model.spec
    X = spec.as_batch(batch)
    N = len(X)
    phi = spec.suff_stat(X)
    # E-step written out directly, without the shared helpers above.
    logp = np.empty((N, model.k))
    for h in range(model.k):
        theta = spec.inverse_link(model.components[h])
        logp[:, h] = (
            np.log(model.weights[h])
            + phi @ theta
            - spec.log_partition(theta)
            + spec.log_base_measure(X)
        )
    m = logp.max(axis=1, keepdims=True)
    resp = np.exp(logp - m)
    resp /= resp.sum(axis=1, keepdims=True)
    bar_s0 = resp.mean(axis=0)
    bar_s1 = (resp[:, :, None] * phi[:, None, :]).mean(axis=0)

    s0 = model.weights.copy()
    s1 = model.weights[:, None] * model.components
    s0 = s0 + eta_t * (bar_s0 - s0)
    s1 = s1 + eta_t * (bar_s1 - s1)

    comps = np.array([spec.project_expectation(s1[h] / s0[h]) for h in range(model.k)])
    return MixtureModel(spec, s0 / s0.sum(), comps)


def sample(model: MixtureModel, count: int, rng: np.random.Generator, return_labels=False):
    """Draw ``count`` observations (and optionally their component labels)."""
    labels = rng.choice(model.k, size=count, p=model.weights)
    X = np.empty((count, model.spec.obs_dim))
    for h in range(model.k):
        idx = np.flatnonzero(labels == h)
        if idx.size:
            X[idx] = model.spec.sampler(model.naturals[h], rng, idx.size)
    return (X, labels) if return_labels else X


def init_from_data(spec: ExpFamSpec, batch, k: int, rng: np.random.Generator) -> MixtureModel:
    """Uniform weights; component means jittered around the data mean.

    Each mean is the data mean plus unit Gaussian noise scaled by the
    per-coordinate data standard deviation; Gaussian covariances start at the
    data covariance.
    """
    X = spec.as_batch(batch)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    comps = []
    if spec.name == "gaussian":
        from .expfam import gaussian_pack

        cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
        for _ in range(k):
            m = mean + std * rng.standard_normal(spec.obs_dim)
            comps.append(spec.project_expectation(gaussian_pack(m, cov)))
    else:
        for _ in range(k):
            m = mean + std * rng.standard_normal(spec.obs_dim)
            comps.append(np.maximum(m, 1e-3))
    return MixtureModel(spec, np.full(k, 1.0 / k), np.array(comps))
