"""Compound Dirichlet (Dirichlet-multinomial) model.

The M-step has no closed form, so updates minimise the EM upper bound with
Newton's method.  The online update replaces the intractable inertia term by
the upper bound on pseudo-documents drawn from the current model.

Sign convention: :func:`upper_bound_value`, :func:`upper_bound_gradient` and
:func:`upper_bound_hessian` all describe the bound in *minimisation* form,
``U(a) = -log Gamma(a_0) + sum_j log Gamma(a_j) - sum_j (a_j - 1) E[log h_j]``.
Its Hessian ``diag(trigamma(a)) - trigamma(a_0) 11^T`` is positive definite;
it is the negative of the Hessian of the concave log-normaliser part.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from . import kernels
from .errors import InvalidParameterError, NumericalError

__all__ = [
    "DirichletModel",
    "NewtonResult",
    "ObjectiveBundle",
    "nll",
    "expected_log_topic",
    "upper_bound_value",
    "upper_bound_gradient",
    "upper_bound_hessian",
    "solve_structured",
    "newton_minimize",
    "sample_documents",
    "batch_em_step",
    "online_em_step_sampled",
    "weighted_m_step",
]

ALPHA_FLOOR = 1e-10


def digamma(x):
    return kernels.digamma(np.asarray(x, dtype=float)).reshape(np.shape(x))


def trigamma(x):
    return kernels.trigamma(np.asarray(x, dtype=float)).reshape(np.shape(x))


@dataclass(frozen=True, eq=False)
class DirichletModel:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float).reshape(-1)
        if a.size == 0:
            raise ValueError("alpha must be nonempty")
        bad = np.flatnonzero(~(np.isfinite(a) & (a > 0)))
        if bad.size:
            raise InvalidParameterError(f"alpha[{bad[0]}] = {a[bad[0]]!r} is not positive")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    @property
    def alpha0(self) -> float:
        return float(self.alpha.sum())

    @property
    def d(self) -> int:
        return len(self.alpha)


def _counts(batch, d: Optional[int] = None) -> np.ndarray:
    V = np.asarray(batch, dtype=float)
    if V.ndim == 1:
        V = V.reshape(1, -1)
    if V.ndim != 2 or len(V) == 0:
        raise ValueError("batch must be a nonempty (N, d) array of counts")
    if d is not None and V.shape[1] != d:
        raise ValueError(f"count vectors have {V.shape[1]} entries, model has {d}")
    if np.any(V < 0) or np.any(V != np.round(V)):
        raise ValueError("counts must be nonnegative integers")
    if np.any(V.sum(axis=1) < 1):
        raise ValueError("every document needs at least one word")
    return V


def nll(model: DirichletModel, batch) -> float:
    """Mean negative log of the Dirichlet-multinomial probability of each document."""
    V = _counts(batch, model.d)
    a = model.alpha
    tot = V.sum(axis=1)
    logp = (
        gammaln(tot + 1)
        - gammaln(V + 1).sum(axis=1)
        + gammaln(model.alpha0)
        - gammaln(tot + model.alpha0)
        + (gammaln(V + a) - gammaln(a)).sum(axis=1)
    )
    return float(-logp.mean())


def expected_log_topic(model_at: DirichletModel, batch) -> np.ndarray:
    """Batch mean of ``E[log h_j | v_n]`` under the posterior ``Dir(alpha + v_n)``."""
    V = _counts(batch, model_at.d)
    a = model_at.alpha
    return (digamma(V + a) - digamma(V.sum(axis=1) + model_at.alpha0)[:, None]).mean(axis=0)


def _value_from_stat(alpha_tilde: np.ndarray, stat: np.ndarray) -> float:
    return float(
        -gammaln(alpha_tilde.sum()) + gammaln(alpha_tilde).sum() - (alpha_tilde - 1.0) @ stat
    )


def _gradient_from_stat(alpha_tilde: np.ndarray, stat: np.ndarray) -> np.ndarray:
    return digamma(alpha_tilde) - digamma(alpha_tilde.sum()) - stat


def _check_alpha(alpha_tilde) -> np.ndarray:
    a = np.asarray(alpha_tilde, dtype=float).reshape(-1)
    if np.any(~(a > 0)):
        raise InvalidParameterError("alpha_tilde must be strictly positive")
    return a


def upper_bound_value(model_at: DirichletModel, alpha_tilde, batch) -> float:
    """EM upper bound (per document, constants dropped) at ``alpha_tilde``."""
    return _value_from_stat(_check_alpha(alpha_tilde), expected_log_topic(model_at, batch))


def upper_bound_gradient(model_at: DirichletModel, alpha_tilde, batch) -> np.ndarray:
    """Gradient of :func:`upper_bound_value` with respect to ``alpha_tilde``.

    Component ``i``: ``psi(a_i) - psi(a_0) + mean_n [psi(V_n + alpha_0) - psi(v_ni + alpha_i)]``
    with the posterior terms evaluated at ``model_at``.
    """
    return _gradient_from_stat(_check_alpha(alpha_tilde), expected_log_topic(model_at, batch))


def upper_bound_hessian(alpha_tilde) -> np.ndarray:
    """``diag(trigamma(a)) - trigamma(a_0) 11^T``; independent of the data."""
    a = _check_alpha(alpha_tilde)
    return np.diag(trigamma(a)) - trigamma(a.sum())


def solve_structured(alpha_tilde, g) -> np.ndarray:
    """Solve ``H x = g`` for the diagonal-minus-rank-one Hessian (Sherman-Morrison)."""
    a = np.asarray(alpha_tilde, dtype=float)
    dinv = 1.0 / trigamma(a)
    c = float(trigamma(a.sum()))
    y = dinv * g
    return y + dinv * (c * y.sum()) / (1.0 - c * dinv.sum())


@dataclass(frozen=True)
class ObjectiveBundle:
    """Objective for :func:`newton_minimize`.

    ``solve(x, g)`` returns ``H(x)^-1 g``; when omitted a dense solve with
    ``hessian`` is used.
    """

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    solve: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class NewtonResult:
    x: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def newton_minimize(
    bundle: ObjectiveBundle,
    alpha_init,
    tol: float = 1e-10,
    max_iter: int = 100,
    floor: float = ALPHA_FLOOR,
) -> NewtonResult:
    """Damped Newton iteration on the positive orthant.

    Each step halves until the objective decreases and every coordinate
    stays above ``floor``.  Non-convergence is reported through the result,
    not raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(alpha_init, dtype=float).copy()
    if np.any(~(x > 0)):
        raise InvalidParameterError("alpha_init must be strictly positive")
    f = bundle.value(x)
    if not np.isfinite(f):
        raise NumericalError("objective is not finite at the starting point")
    for it in range(max_iter + 1):
        g = bundle.gradient(x)
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            raise NumericalError(f"non-finite gradient at iteration {it}")
        if gn < tol:
            return NewtonResult(x, True, it, gn)
        if it == max_iter:
            break
        step = bundle.solve(x, g) if bundle.solve is not None else np.linalg.solve(bundle.hessian(x), g)
        if not np.all(np.isfinite(step)) or step @ g <= 0:
            step = g  # not a descent direction: fall back to steepest descent
        t = 1.0
        for _ in range(60):
            cand = x - t * step
            if np.all(cand > floor):
                fc = bundle.value(cand)
                if not np.isnan(fc) and fc <= f + 1e-13 * max(1.0, abs(f)):
                    break
            t *= 0.5
        else:
            return NewtonResult(x, False, it, gn)
        if not np.isfinite(fc):
            raise NumericalError(f"non-finite objective during line search at iteration {it}")
        if np.array_equal(cand, x):
            return NewtonResult(x, gn < tol, it, gn)
        x, f = cand, fc
    return NewtonResult(x, False, max_iter, float(np.linalg.norm(bundle.gradient(x))))


def _stat_bundle(stat: np.ndarray, scale: float = 1.0) -> ObjectiveBundle:
    """Bundle for ``scale * U`` with averaged log-topic statistic ``stat``."""
    return ObjectiveBundle(
        value=lambda a: scale * _value_from_stat(a, stat),
        gradient=lambda a: scale * _gradient_from_stat(a, stat),
        hessian=lambda a: scale * upper_bound_hessian(a),
        solve=lambda a, g: solve_structured(a, g) / scale,
    )


def weighted_m_step(
    terms: Sequence, alpha_init, tol: float = 1e-10, max_iter: int = 100
) -> NewtonResult:
    """Minimise ``sum_m w_m U_{model_m}(. | batch_m)`` over ``alpha``.

    ``terms`` is a sequence of ``(weight, model_at, batch)`` triples.
    """
    weights = np.array([float(w) for w, _, _ in terms])
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    stat = sum(w * expected_log_topic(m, b) for w, (_, m, b) in zip(weights, terms))
    total = weights.sum()
    return newton_minimize(_stat_bundle(stat / total, total), alpha_init, tol, max_iter)


def batch_em_step(model: DirichletModel, batch, tol: float = 1e-10, max_iter: int = 100) -> DirichletModel:
    """EM iteration: Newton minimisation of the upper bound formed at ``model``."""
    res = weighted_m_step([(1.0, model, batch)], model.alpha, tol, max_iter)
    return DirichletModel(res.x)


def sample_documents(model: DirichletModel, count: int, words_per_doc: int, rng: np.random.Generator) -> np.ndarray:
    """Draw topics ``h ~ Dir(alpha)`` and word counts ``v ~ Mult(L, h)``."""
    if words_per_doc < 1:
        raise ValueError("words_per_doc must be at least 1")
    if model.d == 1:
        return np.full((count, 1), float(words_per_doc))
    H = rng.dirichlet(model.alpha, size=count)
    return rng.multinomial(words_per_doc, H).astype(float)


def online_em_step_sampled(
    model: DirichletModel,
    batch,
    eta: float,
    pseudo_count: int,
    rng: np.random.Generator,
    pseudo_words: Optional[int] = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> DirichletModel:
    """Online EM step with an inertia term estimated from pseudo-documents.

    Draws ``pseudo_count`` documents of ``pseudo_words`` words (default: the
    mean length of ``batch``) from the current model and minimises
    ``U(.|batch) + U(.|pseudo) / eta``, both bounds formed at ``model``.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if pseudo_count < 1:
        raise ValueError("pseudo_count must be at least 1")
    V = _counts(batch, model.d)
    if pseudo_words is None:
        pseudo_words = max(1, int(round(V.sum(axis=1).mean())))
    pseudo = sample_documents(model, pseudo_count, pseudo_words, rng)
    res = weighted_m_step([(1.0, model, V), (1.0 / eta, model, pseudo)], model.alpha, tol, max_iter)
    return DirichletModel(res.x)
