"""Synthetic data generation and the batch, online and distributed experiments."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .. import combiner
from .. import dirichlet as dir_mod
from .. import hmm as hmm_mod
from .. import kalman as kal_mod
from .. import mixture as mix_mod
from ..expfam import gaussian_pack, make_gaussian_spec, make_poisson_spec
from ..schedule import DecaySchedule, TrainLog, TrainRecord, rate, run_online
from .data import ensure_dir, ingest_csv, save_model, write_dataset

__all__ = ["Family", "family_for", "make_data", "generate", "run", "RunResult"]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def _subset(data, idx):
    if isinstance(data, np.ndarray):
        return data[idx]
    return [data[i] for i in idx]


def _emission_spec(cfg):
    m = cfg["model"]
    return make_poisson_spec() if m.get("emission") == "poisson" else make_gaussian_spec(m["dim"])


@dataclass
class Family:
    """Per-family hooks used by the experiment loops."""

    name: str
    truth: Callable  # (cfg, rng) -> model
    sample: Callable  # (cfg, model, count, rng) -> data
    init: Callable  # (cfg, train, rng, truth) -> model
    nll: Callable  # (model, data) -> float
    batch_step: Callable  # (cfg, model, data) -> model
    stepper: Callable  # (cfg, rng) -> (model, batch, eta) -> model


# mixture ---------------------------------------------------------------------------

def _mixture_truth(cfg, rng):
    spec = _emission_spec(cfg)
    k, d = cfg["model"]["k"], cfg["model"]["dim"]
    sep = cfg["data"].get("separation", 2.0)
    w = rng.dirichlet(np.full(k, 5.0))
    if spec.name == "poisson":
        return mix_mod.MixtureModel(spec, w, rng.uniform(1.0, 1.0 + 5.0 * sep, (k, 1)))
    comps = []
    for _ in range(k):
        B = rng.standard_normal((d, d))
        cov = B @ B.T / d + 0.25 * np.eye(d)
        comps.append(gaussian_pack(sep * rng.standard_normal(d), cov))
    return mix_mod.MixtureModel(spec, w, np.array(comps))


def _mixture_init(cfg, train, rng, truth):
    return mix_mod.init_from_data(_emission_spec(cfg), train, cfg["model"]["k"], rng)


MIXTURE = Family(
    "mixture",
    _mixture_truth,
    lambda cfg, m, n, rng: mix_mod.sample(m, n, rng),
    _mixture_init,
    mix_mod.nll,
    lambda cfg, m, data: mix_mod.batch_em_step(m, data),
    lambda cfg, rng: mix_mod.online_em_step,
)


# hmm -------------------------------------------------------------------------------

def _hmm_truth(cfg, rng):
    m = cfg["model"]
    return hmm_mod.random_model(_emission_spec(cfg), m["transient"], m["absorbing"], rng)


def _hmm_init(cfg, train, rng, truth):
    m = cfg["model"]
    return hmm_mod.init_from_data(_emission_spec(cfg), train, m["transient"], m["absorbing"], rng)


HMM = Family(
    "hmm",
    _hmm_truth,
    lambda cfg, m, n, rng: hmm_mod.sample_sequences(m, n, rng, cfg["data"]["max_len"]),
    _hmm_init,
    hmm_mod.nll,
    lambda cfg, m, data: hmm_mod.batch_em_step(m, data),
    lambda cfg, rng: hmm_mod.online_em_step,
)


# kalman ----------------------------------------------------------------------------

def _kalman_truth(cfg, rng):
    return kal_mod.random_model(cfg["model"]["hidden_dim"], cfg["model"]["dim"], rng)


def _kalman_sample(cfg, model, n, rng):
    return list(kal_mod.sample_sequences(model, n, cfg["model"]["length"], rng))


def _kalman_init(cfg, train, rng, truth):
    init = kal_mod.random_model(cfg["model"]["hidden_dim"], cfg["model"]["dim"], rng)
    fixed = {"Q": "Qn", "R": "Rn"}
    if truth is not None:
        # parameters excluded from the update are taken as known
        known = {fixed[p]: getattr(truth, fixed[p]) for p in fixed if p not in cfg["model"]["update"]}
        init = kal_mod.with_params(init, **known)
    return init


KALMAN = Family(
    "kalman",
    _kalman_truth,
    _kalman_sample,
    _kalman_init,
    kal_mod.nll,
    lambda cfg, m, data: kal_mod.batch_em_step(m, data, cfg["model"]["update"]),
    lambda cfg, rng: lambda m, b, eta: kal_mod.online_em_step(m, b, eta, cfg["model"]["update"]),
)


# dirichlet -------------------------------------------------------------------------

def _dirichlet_truth(cfg, rng):
    return dir_mod.DirichletModel(rng.uniform(0.5, 5.0, cfg["model"]["dim"]))


def _dirichlet_init(cfg, train, rng, truth):
    return dir_mod.DirichletModel(rng.uniform(0.5, 2.0, cfg["model"]["dim"]))


def _dirichlet_stepper(cfg, rng):
    p = cfg.get("pseudo", {})

    def step(model, batch, eta):
        return dir_mod.online_em_step_sampled(model, batch, eta, p.get("count", 2000), rng, p.get("words"))

    return step


DIRICHLET = Family(
    "dirichlet",
    _dirichlet_truth,
    lambda cfg, m, n, rng: dir_mod.sample_documents(m, n, cfg["data"]["words_per_doc"], rng),
    _dirichlet_init,
    dir_mod.nll,
    lambda cfg, m, data: dir_mod.batch_em_step(m, data),
    _dirichlet_stepper,
)

_FAMILIES = {f.name: f for f in (MIXTURE, HMM, KALMAN, DIRICHLET)}


def family_for(name: str) -> Family:
    return _FAMILIES[name]


# data ------------------------------------------------------------------------------

def make_data(cfg) -> Tuple[object, object, object]:
    """``(train, holdout, truth)`` from the configured source.

    Synthetic data depends only on ``cfg["seed"]``, so :func:`generate` and
    :func:`run` see identical datasets for the same seed.
    """
    fam = family_for(cfg["family"])
    src = cfg["data"]
    if src.get("source", "synthetic") == "csv":
        dim = cfg["model"].get("dim")
        train = ingest_csv(src["path"], fam.name, dim).data
        hold = ingest_csv(src["holdout_path"], fam.name, dim).data if "holdout_path" in src else None
        return train, hold, None
    rng = _rng(cfg["seed"], 0)
    truth = fam.truth(cfg, rng)
    train = fam.sample(cfg, truth, src["count"], rng)
    hold = fam.sample(cfg, truth, src["holdout"], rng) if src.get("holdout", 0) > 0 else None
    return train, hold, truth


def generate(cfg, out: str) -> List[str]:
    """Write ``train.csv``, ``holdout.csv`` (if any) and ``true_model.json``."""
    if cfg["data"].get("source", "synthetic") != "synthetic":
        raise ValueError("generate needs data.source = synthetic")
    ensure_dir(out)
    train, hold, truth = make_data(cfg)
    written = [os.path.join(out, "train.csv")]
    write_dataset(cfg["family"], train, written[0])
    if hold is not None:
        written.append(os.path.join(out, "holdout.csv"))
        write_dataset(cfg["family"], hold, written[-1])
    written.append(os.path.join(out, "true_model.json"))
    save_model(truth, written[-1])
    return written


# experiment loops ------------------------------------------------------------------

def _minibatches(data, size: int, epochs: int, rng):
    n = len(data)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, size):
            yield _subset(data, perm[start : start + size])


def _batch_run(cfg, fam: Family, model, train, hold, iterations: int):
    log = TrainLog(has_holdout=hold is not None)
    pre = fam.nll(model, train)
    for it in range(1, iterations + 1):
        model = fam.batch_step(cfg, model, train)
        post = fam.nll(model, train)
        h = fam.nll(model, hold) if hold is not None else None
        log.append(TrainRecord(it, math.inf, pre, post, h))
        pre = post
    return model, log


@dataclass
class RepeatResult:
    logs: Dict[str, TrainLog]
    finals: Dict[str, Tuple[float, Optional[float]]]  # method -> (train nll, holdout nll)


def _single_machine(cfg, fam: Family, train, hold, truth, r: int) -> RepeatResult:
    init = fam.init(cfg, train, _rng(cfg["seed"], 1, r), truth)
    logs, finals = {}, {}

    def final(method, model):
        finals[method] = (fam.nll(model, train), fam.nll(model, hold) if hold is not None else None)

    bmodel, blog = _batch_run(cfg, fam, init, train, hold, cfg["batch_iterations"])
    logs["batch_em"] = blog
    finals["batch_em_1"] = (blog.records[0].nll_batch_post, blog.records[0].nll_holdout)
    final("batch_em", bmodel)
    if cfg["mode"] == "online":
        sched = DecaySchedule(cfg["schedule"]["eta0"], cfg["schedule"]["beta"])
        stream = _minibatches(train, cfg["batch_size"], cfg["epochs"], _rng(cfg["seed"], 3, r))
        omodel, olog = run_online(
            init,
            stream,
            sched,
            fam.stepper(cfg, _rng(cfg["seed"], 2, r)),
            fam.nll,
            holdout=hold,
            holdout_every=cfg["holdout_every"],
            record_time=cfg["record_time"],
        )
        logs["online_em"] = olog
        final("online_em", omodel)
    return RepeatResult(logs, finals)


def _worker_round(fam, cfg, model, batches, t0, sched):
    step = fam.stepper(cfg, None)
    t = t0
    for b in batches:
        t += 1
        model = step(model, b, rate(sched, t))
    return model, t


def _distributed(cfg, fam: Family, train, hold, truth, r: int, pool: Optional[ThreadPoolExecutor]) -> RepeatResult:
    """Synchronous rounds: each worker runs online EM on its next block, then all combine.

    Every strategy starts from the same initial model and sees the same
    shards in the same order, so results are paired across strategies.
    """
    dist = cfg["distributed"]
    M, sync, bs = dist["workers"], dist["sync_every"], cfg["batch_size"]
    sched = DecaySchedule(cfg["schedule"]["eta0"], cfg["schedule"]["beta"])
    n = len(train)
    order = _rng(cfg["seed"], 3, r).permutation(n)
    shards = [order[m::M] for m in range(M)]
    init = fam.init(cfg, train, _rng(cfg["seed"], 1, r), truth)
    rounds = max(math.ceil(len(s) / sync) for s in shards)
    logs, finals = {}, {}
    for strategy in dist["strategies"]:
        model = init
        t_worker = [0] * M
        log = TrainLog(has_holdout=hold is not None)
        for rd in range(rounds):
            blocks = [s[rd * sync : (rd + 1) * sync] for s in shards]
            active = [m for m in range(M) if len(blocks[m])]
            seen = _subset(train, np.concatenate([blocks[m] for m in active]))
            pre = fam.nll(model, seen)
            jobs = [
                (fam, cfg, model, [_subset(train, blocks[m][i : i + bs]) for i in range(0, len(blocks[m]), bs)], t_worker[m], sched)
                for m in active
            ]
            if pool is not None:
                results = list(pool.map(lambda a: _worker_round(*a), jobs))
            else:
                results = [_worker_round(*a) for a in jobs]
            for m, (_, t) in zip(active, results):
                t_worker[m] = t
            if dist["alpha"] == "shard_size":
                weights = [len(blocks[m]) for m in active]
            else:
                weights = [1.0] * len(active)
            wm = combiner.WeightedModels([res[0] for res in results], weights)
            model = combiner.combine(wm, strategy)
            post = fam.nll(model, seen)
            h = fam.nll(model, hold) if hold is not None else None
            log.append(TrainRecord(rd + 1, rate(sched, max(t_worker)), pre, post, h))
        logs[strategy] = log
        finals[strategy] = (fam.nll(model, train), fam.nll(model, hold) if hold is not None else None)
    return RepeatResult(logs, finals)


@dataclass
class RunResult:
    repeats: List[RepeatResult]
    files: List[str]

    def finals(self, method: str, which: int = 0) -> np.ndarray:
        return np.array([rep.finals[method][which] for rep in self.repeats], dtype=float)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def run(cfg, out: Optional[str] = None, threads: int = 1) -> RunResult:
    """Run the configured experiment; write logs and summaries under ``out``."""
    fam = family_for(cfg["family"])
    train, hold, truth = make_data(cfg)
    R = cfg["repeats"]
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        if cfg["mode"] == "distributed":
            reps = [_distributed(cfg, fam, train, hold, truth, r, pool) for r in range(R)]
        elif pool is not None:
            reps = list(pool.map(lambda r: _single_machine(cfg, fam, train, hold, truth, r), range(R)))
        else:
            reps = [_single_machine(cfg, fam, train, hold, truth, r) for r in range(R)]
    finally:
        if pool is not None:
            pool.shutdown()
    if cfg["mode"] == "batch":
        for rep in reps:
            rep.finals = {k: v for k, v in rep.finals.items() if k.startswith("batch")}

    files: List[str] = []
    if out is not None:
        ensure_dir(out)
        width = max(2, len(str(R - 1)))
        for r, rep in enumerate(reps):
            for method, log in rep.logs.items():
                path = os.path.join(out, f"{method}_r{r:0{width}d}.csv")
                with open(path, "w", newline="") as fh:
                    log.to_csv(fh)
                files.append(path)
        methods = list(reps[0].finals)
        rows = [
            [r, m, _num(rep.finals[m][0]), _num(rep.finals[m][1])]
            for r, rep in enumerate(reps)
            for m in methods
        ]
        files.append(os.path.join(out, "finals.csv"))
        _write_rows(files[-1], ["repeat", "method", "nll_train", "nll_holdout"], rows)
        summary = []
        for m in methods:
            for j, metric in enumerate(("nll_train", "nll_holdout")):
                vals = np.array([np.nan if rep.finals[m][j] is None else rep.finals[m][j] for rep in reps])
                if np.all(np.isnan(vals)):
                    continue
                summary.append([m, metric, _num(np.mean(vals)), _num(np.min(vals)), _num(np.max(vals)), len(vals)])
        files.append(os.path.join(out, "summary.csv"))
        _write_rows(files[-1], ["method", "metric", "mean", "min", "max", "count"], summary)
        files.append(os.path.join(out, "curves.csv"))
        _write_rows(files[-1], ["method", "t", "mean", "min", "max"], _curves(reps))
    return RunResult(reps, files)


def _curves(reps: List[RepeatResult]):
    """Per-method curves aggregated over repeats (holdout nll when present)."""
    rows = []
    for method in reps[0].logs:
        logs = [rep.logs[method] for rep in reps]
        col = "nll_holdout" if logs[0].has_holdout else "nll_batch_post"
        Y = np.array([lg.column(col) for lg in logs])
        ts = logs[0].column("t").astype(int)
        for i, t in enumerate(ts):
            y = Y[:, i][~np.isnan(Y[:, i])]
            if y.size:
                rows.append([method, int(t), _num(y.mean()), _num(y.min()), _num(y.max())])
    return rows
