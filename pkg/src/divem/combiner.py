"""Combining locally trained models into one global model.

The entropic combiners minimise ``sum_m a_m KL(p(h, v | model_m) || p(h, v | .))``
over the combined model.  For mixtures and absorbing HMMs this is a convex
combination of complete-data statistics: component means are weighted by
the mixture weight (or expected state usage) each local model assigns to
them.  :func:`combine_simple_average` is the parameter-wise baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import dirichlet as dir_mod
from . import hmm as hmm_mod
from . import mixture as mix_mod
from .expfam import gaussian_pack, gaussian_unpack

__all__ = [
    "WeightedModels",
    "combine_mixtures",
    "combine_hmms",
    "combine_simple_average",
    "combine_sampled",
    "combine",
]

DEAD_MASS = 1e-12


@dataclass(frozen=True)
class WeightedModels:
    """Models of one family and shape, with nonnegative combining weights."""

    models: tuple
    weights: np.ndarray

    def __init__(self, models: Sequence, weights=None):
        models = tuple(models)
        if not models:
            raise ValueError("need at least one model")
        w = np.ones(len(models)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        if len(w) != len(models):
            raise ValueError(f"{len(w)} weights for {len(models)} models")
        if np.any(~np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with a positive sum")
        kinds = {type(m) for m in models}
        if len(kinds) != 1:
            raise ValueError("models must all be of the same family")
        want = _shape(models[0])
        for i, m in enumerate(models[1:], 1):
            if _shape(m) != want:
                raise ValueError(f"model {i} has shape {_shape(m)}, expected {want}")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "weights", w)

    @property
    def normalised(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def _shape(m):
    if isinstance(m, mix_mod.MixtureModel):
        return ("mixture", m.spec.name, m.spec.dim_stat, m.k)
    if isinstance(m, hmm_mod.HmmModel):
        return ("hmm", m.spec.name, m.spec.dim_stat, m.k, m.s)
    if isinstance(m, dir_mod.DirichletModel):
        return ("dirichlet", m.d)
    raise TypeError(f"cannot combine models of type {type(m).__name__}")


def _fallback_index(wm: WeightedModels) -> int:
    return int(np.argmax(wm.weights))


def combine_mixtures(wm: WeightedModels) -> mix_mod.MixtureModel:
    """Entropic combination of aligned mixtures."""
    a = wm.normalised
    W = np.array([m.weights for m in wm.models])  # (M, k)
    MU = np.array([m.components for m in wm.models])  # (M, k, D)
    omega = a @ W
    first = wm.models[0]
    comps = np.empty_like(first.components)
    for h in range(first.k):
        mass = a * W[:, h]
        if mass.sum() < DEAD_MASS:
            warnings.warn(f"combine_mixtures: component {h} has no mass", RuntimeWarning, stacklevel=2)
            comps[h] = wm.models[_fallback_index(wm)].components[h]
            continue
        comps[h] = first.spec.project_expectation(mass @ MU[:, h] / mass.sum())
    return mix_mod.MixtureModel(first.spec, omega / omega.sum(), comps)


def combine_hmms(wm: WeightedModels) -> hmm_mod.HmmModel:
    """Entropic combination of aligned absorbing HMMs, weighting rows by usage."""
    a = wm.normalised
    first = wm.models[0]
    s = first.s
    U = np.array([m.usage for m in wm.models])  # (M, s)
    pi = a @ np.array([m.initial for m in wm.models])
    A = first.transitions.copy()
    E = first.emissions.copy()
    for h in range(s):
        mass = a * U[:, h]
        if mass.sum() < DEAD_MASS:
            warnings.warn(f"combine_hmms: state {h} has no usage", RuntimeWarning, stacklevel=2)
            fb = wm.models[_fallback_index(wm)]
            A[h], E[h] = fb.transitions[h], fb.emissions[h]
            continue
        row = mass @ np.array([m.transitions[h] for m in wm.models]) / mass.sum()
        A[h] = row / row.sum()
        E[h] = first.spec.project_expectation(
            mass @ np.array([m.emissions[h] for m in wm.models]) / mass.sum()
        )
    return hmm_mod.HmmModel(first.spec, pi / pi.sum(), A, E, s)


def _average_components(spec, comps: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Weighted mean of component means and covariances (not second moments)."""
    if spec.name == "gaussian":
        d = spec.obs_dim
        means, covs = gaussian_unpack(comps, d)
        return np.array([gaussian_pack(a @ means[:, h], np.tensordot(a, covs[:, h], axes=1)) for h in range(comps.shape[1])])
    return np.tensordot(a, comps, axes=1)


def combine_simple_average(wm: WeightedModels):
    """Parameter-wise weighted averaging baseline."""
    a = wm.normalised
    first = wm.models[0]
    if isinstance(first, mix_mod.MixtureModel):
        omega = a @ np.array([m.weights for m in wm.models])
        comps = _average_components(first.spec, np.array([m.components for m in wm.models]), a)
        return mix_mod.MixtureModel(first.spec, omega / omega.sum(), comps)
    if isinstance(first, hmm_mod.HmmModel):
        pi = a @ np.array([m.initial for m in wm.models])
        A = np.tensordot(a, np.array([m.transitions for m in wm.models]), axes=1)
        A = A / A.sum(axis=1, keepdims=True)
        E = _average_components(first.spec, np.array([m.emissions for m in wm.models]), a)
        return hmm_mod.HmmModel(first.spec, pi / pi.sum(), A, E, first.s)
    if isinstance(first, dir_mod.DirichletModel):
        return dir_mod.DirichletModel(a @ np.array([m.alpha for m in wm.models]))
    raise TypeError(f"cannot average models of type {type(first).__name__}")


def _sampled_mixture(wm, samples):
    a = wm.normalised
    first = wm.models[0]
    mass = np.zeros(first.k)
    weighted = np.zeros_like(first.components)
    for am, m, X in zip(a, wm.models, samples):
        s0, s1 = mix_mod.batch_statistics(m, X)
        mass += am * s0
        weighted += am * s1
    return mix_mod.from_statistics(first, mass, weighted, "combine_sampled")


def _sampled_hmm(wm, samples):
    a = wm.normalised
    first = wm.models[0]
    stats = [hmm_mod.batch_statistics(m, X) for m, X in zip(wm.models, samples)]
    merged = hmm_mod.HmmStatistics(
        initial=sum(am * st.initial for am, st in zip(a, stats)),
        transitions=sum(am * st.transitions for am, st in zip(a, stats)),
        occupancy=sum(am * st.occupancy for am, st in zip(a, stats)),
        emissions=sum(am * st.emissions for am, st in zip(a, stats)),
        log_likelihood=0.0,
    )
    return hmm_mod._update(first, merged, 0.0, "combine_sampled")


def _sampled_dirichlet(wm, samples):
    start = combine_simple_average(wm).alpha
    res = dir_mod.weighted_m_step(list(zip(wm.normalised, wm.models, samples)), start)
    return dir_mod.DirichletModel(res.x)


def _draw(model, count: int, rng: np.random.Generator, words_per_doc: int, max_len: int):
    if isinstance(model, mix_mod.MixtureModel):
        return mix_mod.sample(model, count, rng)
    if isinstance(model, hmm_mod.HmmModel):
        return hmm_mod.sample_sequences(model, count, rng, max_len)
    if isinstance(model, dir_mod.DirichletModel):
        return dir_mod.sample_documents(model, count, words_per_doc, rng)
    raise TypeError(f"cannot sample from {type(model).__name__}")


def combine_sampled(
    wm: WeightedModels,
    pseudo_sizes,
    rng: np.random.Generator,
    solver: Optional[Callable] = None,
    words_per_doc: int = 100,
    max_len: int = 1000,
):
    """Combine through the sampled form of the divergence.

    Draws ``pseudo_sizes[m]`` observations from each model, forms each
    model's EM upper bound on its own samples, and returns the minimiser of
    their weighted sum.  ``solver(wm, samples)`` overrides the built-in
    family solver.
    """
    sizes = np.broadcast_to(np.asarray(pseudo_sizes, dtype=int), (len(wm.models),))
    if np.any(sizes < 1):
        raise ValueError("pseudo sample sizes must be positive")
    samples = [_draw(m, int(n), rng, words_per_doc, max_len) for m, n in zip(wm.models, sizes)]
    if solver is not None:
        return solver(wm, samples)
    first = wm.models[0]
    if isinstance(first, mix_mod.MixtureModel):
        return _sampled_mixture(wm, samples)
    if isinstance(first, hmm_mod.HmmModel):
        return _sampled_hmm(wm, samples)
    return _sampled_dirichlet(wm, samples)


def combine(wm: WeightedModels, strategy: str = "entropic"):
    """Dispatch on family and strategy (``"entropic"`` or ``"simple"``)."""
    if strategy == "simple":
        return combine_simple_average(wm)
    if strategy != "entropic":
        raise ValueError(f"unknown combine strategy {strategy!r}")
    first = wm.models[0]
    if isinstance(first, mix_mod.MixtureModel):
        return combine_mixtures(wm)
    if isinstance(first, hmm_mod.HmmModel):
        return combine_hmms(wm)
    raise TypeError(f"no closed-form entropic combiner for {type(first).__name__}")
