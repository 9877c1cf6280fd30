"""Exponential-family primitives and Bregman-divergence combination rules.

A family is described by :class:`ExpFamSpec`, which bundles the sufficient
statistic ``phi``, the log-partition ``G``, the link ``g = grad G`` mapping
natural parameters to expectation parameters, and its inverse.  Parameter
vectors are wrapped in :class:`NaturalParams` / :class:`ExpectationParams` so
that the two coordinate systems cannot be mixed up silently.

Every closed-form M-step in this package reduces to :func:`combine_partial`:
a weighted average of expectation parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import InvalidParameterError

__all__ = [
    "NaturalParams",
    "ExpectationParams",
    "ExpFamSpec",
    "bregman_divergence",
    "dual_bregman_divergence",
    "combine_partial",
    "combine_forward",
    "combine_backward",
    "make_gaussian_spec",
    "make_poisson_spec",
    "gaussian_pack",
    "gaussian_unpack",
    "COV_EIG_FLOOR",
]

#: Smallest eigenvalue allowed for a Gaussian covariance after an update.
COV_EIG_FLOOR = 1e-8


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NaturalParams:
    """Natural-parameter vector ``theta``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class ExpectationParams:
    """Expectation-parameter vector ``mu = E[phi(x)]``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


def _natural(p) -> np.ndarray:
    if not isinstance(p, NaturalParams):
        raise TypeError(f"expected NaturalParams, got {type(p).__name__}")
    return p.values


def _expectation(p) -> np.ndarray:
    if not isinstance(p, ExpectationParams):
        raise TypeError(f"expected ExpectationParams, got {type(p).__name__}")
    return p.values


@dataclass(frozen=True, eq=False)
class ExpFamSpec:
    """An exponential family ``p(x|theta) = b(x) exp(theta . phi(x) - G(theta))``.

    All callables act on plain numpy arrays.  ``suff_stat`` and
    ``log_base_measure`` are vectorised over a batch of shape
    ``(N, obs_dim)``.  ``domain_violation`` / ``expectation_violation`` return
    a message naming the offending coordinate, or ``None`` when the vector is
    valid.
    """

    name: str
    obs_dim: int
    dim_stat: int
    suff_stat: Callable[[np.ndarray], np.ndarray]
    log_partition: Callable[[np.ndarray], float]
    link: Callable[[np.ndarray], np.ndarray]
    inverse_link: Callable[[np.ndarray], np.ndarray]
    sampler: Callable[[np.ndarray, np.random.Generator, int], np.ndarray]
    domain_violation: Callable[[np.ndarray], Optional[str]]
    expectation_violation: Callable[[np.ndarray], Optional[str]]
    log_base_measure: Callable[[np.ndarray], np.ndarray]
    project_expectation: Callable[[np.ndarray], np.ndarray] = field(
        default=lambda mu: mu
    )
    params: dict = field(default_factory=dict)

    def natural_domain(self, theta: np.ndarray) -> bool:
        return self.domain_violation(np.asarray(theta, dtype=float)) is None

    def as_batch(self, X) -> np.ndarray:
        """Coerce observations to a ``(N, obs_dim)`` float array."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.obs_dim) if self.obs_dim == 1 else X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.obs_dim:
            raise ValueError(
                f"observations must have trailing dimension {self.obs_dim}, "
                f"got shape {np.shape(X)}"
            )
        return X

    def log_density(self, theta: np.ndarray, X) -> np.ndarray:
        """Log density of each row of ``X`` under natural parameters ``theta``."""
        X = self.as_batch(X)
        return (
            self.suff_stat(X) @ theta
            - self.log_partition(theta)
            + self.log_base_measure(X)
        )

    def check_expectation(self, mu: np.ndarray, label: str = "mu") -> None:
        msg = self.expectation_violation(mu)
        if msg is not None:
            raise InvalidParameterError(f"{label}: {msg}")

    def check_natural(self, theta: np.ndarray, label: str = "theta") -> None:
        msg = self.domain_violation(theta)
        if msg is not None:
            raise InvalidParameterError(f"{label}: {msg}")


def bregman_divergence(
    spec: ExpFamSpec, theta_tilde: NaturalParams, theta: NaturalParams
) -> float:
    """``G(theta_tilde) - G(theta) - g(theta) . (theta_tilde - theta)``.

    This is the relative entropy from ``p(.|theta)`` to ``p(.|theta_tilde)``.
    """
    tt, t = _natural(theta_tilde), _natural(theta)
    spec.check_natural(tt, "theta_tilde")
    spec.check_natural(t, "theta")
    val = (
        spec.log_partition(tt)
        - spec.log_partition(t)
        - float(spec.link(t) @ (tt - t))
    )
    return max(float(val), 0.0)


def dual_bregman_divergence(
    spec: ExpFamSpec, mu: ExpectationParams, mu_tilde: ExpectationParams
) -> float:
    """Bregman divergence of the conjugate ``G*`` between expectation parameters.

    Evaluated through the identity ``D_{G*}(mu, mu_tilde) = D_G(theta_tilde, theta)``
    so ``G*`` itself is never needed.
    """
    m, mt = _expectation(mu), _expectation(mu_tilde)
    spec.check_expectation(m, "mu")
    spec.check_expectation(mt, "mu_tilde")
    return bregman_divergence(
        spec,
        NaturalParams(spec.inverse_link(mt)),
        NaturalParams(spec.inverse_link(m)),
    )


def _check_weights(weights, count: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != count:
        raise ValueError(f"got {w.size} weights for {count} parameter vectors")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise ValueError("weights must not all be zero")
    return w


def combine_partial(
    spec: ExpFamSpec, weights, duals: Sequence[ExpectationParams]
) -> ExpectationParams:
    """Minimiser of ``sum_m a_m (G(theta) - theta . mu_m)``, in expectation form.

    The optimum is the weighted mean of the ``mu_m``.  Inputs may sit on the
    boundary of the expectation domain (a Poisson rate of 0, say); only the
    combined vector has to be a valid expectation parameter.
    """
    mus = np.array([_expectation(d) for d in duals])
    w = _check_weights(weights, len(mus))
    if mus.ndim != 2 or mus.shape[1] != spec.dim_stat:
        raise ValueError(f"duals must have {spec.dim_stat} coordinates each")
    if not np.all(np.isfinite(mus)):
        raise InvalidParameterError("duals contain non-finite values")
    out = w @ mus / w.sum()
    spec.check_expectation(out, "combined expectation")
    return ExpectationParams(out)


def combine_backward(
    spec: ExpFamSpec, weights, duals: Sequence[ExpectationParams]
) -> ExpectationParams:
    """Minimiser over ``mu_tilde`` of ``sum_m a_m D_{G*}(mu_m, mu_tilde)``."""
    return combine_partial(spec, weights, duals)


def combine_forward(
    spec: ExpFamSpec, weights, thetas: Sequence[NaturalParams]
) -> NaturalParams:
    """Minimiser over ``theta_tilde`` of ``sum_m a_m D_G(theta_tilde, theta_m)``."""
    ths = [_natural(t) for t in thetas]
    for m, th in enumerate(ths):
        spec.check_natural(th, f"thetas[{m}]")
    mu = combine_partial(
        spec, weights, [ExpectationParams(spec.link(th)) for th in ths]
    )
    return NaturalParams(spec.inverse_link(mu.values))


# ---------------------------------------------------------------------------
# Gaussian family, phi(x) = (x, vec(x x^T))
# ---------------------------------------------------------------------------


def gaussian_pack(mean, cov) -> np.ndarray:
    """Expectation vector ``(mean, vec(cov + mean mean^T))``."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    return np.concatenate([mean, (cov + np.outer(mean, mean)).reshape(-1)])


def gaussian_unpack(mu, dim: int):
    """Split an expectation vector into ``(mean, covariance)``."""
    mu = np.asarray(mu, dtype=float)
    mean = mu[..., :dim]
    second = mu[..., dim:].reshape(mu.shape[:-1] + (dim, dim))
    cov = second - mean[..., :, None] * mean[..., None, :]
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mean, cov


def make_gaussian_spec(dim: int) -> ExpFamSpec:
    """Full-covariance Gaussian on ``R^dim``.

    Natural parameters are ``(S^-1 m, vec(-S^-1 / 2))``.  The second block is
    kept as a full matrix so that ``link`` is the exact gradient of ``G`` with
    respect to every coordinate; the domain requires it to be symmetric
    negative definite.
    """
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    d = int(dim)
    const = 0.5 * d * math.log(2.0 * math.pi)

    def split(theta):
        theta = np.asarray(theta, dtype=float)
        return theta[:d], theta[d:].reshape(d, d)

    def suff_stat(X):
        X = np.asarray(X, dtype=float)
        return np.concatenate(
            [X, (X[:, :, None] * X[:, None, :]).reshape(len(X), d * d)], axis=1
        )

    def log_partition(theta):
        t1, t2 = split(theta)
        sign, logdet = np.linalg.slogdet(-2.0 * t2)
        if sign <= 0:
            return math.inf
        return float(-0.25 * t1 @ np.linalg.solve(t2, t1) - 0.5 * logdet + const)

    def link(theta):
        t1, t2 = split(theta)
        inv = np.linalg.inv(t2)
        g1 = -0.25 * (inv + inv.T) @ t1
        it = inv.T
        g2 = 0.25 * it @ np.outer(t1, t1) @ it - 0.5 * it
        return np.concatenate([g1, g2.reshape(-1)])

    def inverse_link(mu):
        mu = np.asarray(mu, dtype=float)
        mean, cov = gaussian_unpack(mu, d)
        try:
            if not np.all(np.isfinite(mu)):
                raise np.linalg.LinAlgError
            chol = np.linalg.cholesky(cov)
        except (np.linalg.LinAlgError, ValueError):
            raise InvalidParameterError(expectation_violation(mu) or "invalid expectation vector") from None
        li = np.linalg.inv(chol)
        prec = li.T @ li
        prec = 0.5 * (prec + prec.T)
        return np.concatenate([prec @ mean, (-0.5 * prec).reshape(-1)])

    def domain_violation(theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (d + d * d,):
            return f"expected {d + d * d} coordinates, got shape {theta.shape}"
        bad = np.flatnonzero(~np.isfinite(theta))
        if bad.size:
            return f"theta[{bad[0]}] is not finite"
        _, t2 = split(theta)
        asym = np.abs(t2 - t2.T)
        scale = max(1.0, float(np.max(np.abs(t2))))
        if asym.max() > 1e-9 * scale:
            i, j = np.unravel_index(np.argmax(asym), asym.shape)
            return f"theta[{d + i * d + j}] breaks symmetry of the precision block"
        eig = np.linalg.eigvalsh(-0.5 * (t2 + t2.T))
        if eig[0] <= 0:
            return (
                f"theta[{d}:] precision block is not negative definite "
                f"(eigenvalue {-eig[0]:.3g})"
            )
        return None

    def expectation_violation(mu):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (d + d * d,):
            return f"expected {d + d * d} coordinates, got shape {mu.shape}"
        bad = np.flatnonzero(~np.isfinite(mu))
        if bad.size:
            return f"mu[{bad[0]}] is not finite"
        _, cov = gaussian_unpack(mu, d)
        try:
            np.linalg.cholesky(cov)
            return None
        except np.linalg.LinAlgError:
            eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0:
            return f"mu[{d}:] implied covariance not positive definite (eigenvalue {eig[0]:.3g})"
        return None

    def project_expectation(mu):
        mean, cov = gaussian_unpack(mu, d)
        w, U = np.linalg.eigh(cov)
        if w[0] < COV_EIG_FLOOR:
            cov = (U * np.maximum(w, COV_EIG_FLOOR)) @ U.T
            cov = 0.5 * (cov + cov.T)
        return gaussian_pack(mean, cov)

    def sampler(theta, rng, size):
        t1, t2 = split(theta)
        cov = np.linalg.inv(-2.0 * t2)
        cov = 0.5 * (cov + cov.T)
        mean = cov @ t1
        chol = np.linalg.cholesky(cov)
        return mean + rng.standard_normal((size, d)) @ chol.T

    def log_base_measure(X):
        return np.zeros(len(X))

    return ExpFamSpec(
        name="gaussian",
        obs_dim=d,
        dim_stat=d + d * d,
        suff_stat=suff_stat,
        log_partition=log_partition,
        link=link,
        inverse_link=inverse_link,
        sampler=sampler,
        domain_violation=domain_violation,
        expectation_violation=expectation_violation,
        log_base_measure=log_base_measure,
        project_expectation=project_expectation,
        params={"dim": d},
    )


def make_poisson_spec() -> ExpFamSpec:
    """Poisson counts: ``phi(x) = x``, ``G(theta) = exp(theta)``."""

    def suff_stat(X):
        return np.asarray(X, dtype=float).reshape(-1, 1)

    def log_partition(theta):
        return float(np.exp(np.asarray(theta, dtype=float)[0]))

    def link(theta):
        return np.exp(np.asarray(theta, dtype=float))

    def inverse_link(mu):
        msg = expectation_violation(mu)
        if msg is not None:
            raise InvalidParameterError(msg)
        return np.log(np.asarray(mu, dtype=float))

    def domain_violation(theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (1,):
            return f"expected 1 coordinate, got shape {theta.shape}"
        if not np.isfinite(theta[0]):
            return "theta[0] is not finite"
        return None

    def expectation_violation(mu):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (1,):
            return f"expected 1 coordinate, got shape {mu.shape}"
        if not (np.isfinite(mu[0]) and mu[0] > 0):
            return f"mu[0] = {mu[0]!r} is not a positive rate"
        return None

    def sampler(theta, rng, size):
        return rng.poisson(math.exp(theta[0]), size=(size, 1)).astype(float)

    def log_base_measure(X):
        return -gammaln(np.asarray(X, dtype=float).reshape(-1) + 1.0)

    return ExpFamSpec(
        name="poisson",
        obs_dim=1,
        dim_stat=1,
        suff_stat=suff_stat,
        log_partition=log_partition,
        link=link,
        inverse_link=inverse_link,
        sampler=sampler,
        domain_violation=domain_violation,
        expectation_violation=expectation_violation,
        log_base_measure=log_base_measure,
        params={},
    )


def spec_from_dict(d: dict) -> ExpFamSpec:
    kind = d.get("kind")
    if kind == "gaussian":
        return make_gaussian_spec(int(d["dim"]))
    if kind == "poisson":
        return make_poisson_spec()
    raise ValueError(f"unknown exponential family {kind!r}")


def spec_to_dict(spec: ExpFamSpec) -> dict:
    return {"kind": spec.name, **spec.params}
