"""Learning-rate schedules and the online training loop."""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional

import numpy as np

from .errors import DivemError, InvalidParameterError

__all__ = ["DecaySchedule", "rate", "TrainRecord", "TrainLog", "run_online", "StepError"]

LOG_COLUMNS = ("t", "eta", "nll_batch_pre", "nll_batch_post", "nll_holdout", "ms")


@dataclass(frozen=True)
class DecaySchedule:
    """``eta_t = eta0 / t**beta``.

    ``beta`` must lie in ``(0.5, 1]`` so that the rates sum to infinity while
    their squares do not.  ``beta = 0.5`` itself is accepted with a warning
    because some published settings use it.
    """

    eta0: float
    beta: float

    def __post_init__(self):
        if not (np.isfinite(self.eta0) and self.eta0 > 0):
            raise InvalidParameterError(f"eta0 must be positive, got {self.eta0}")
        if self.beta == 0.5:
            warnings.warn(
                "beta = 0.5: squared rates are not summable; accepted anyway",
                RuntimeWarning,
                stacklevel=3,
            )
        elif not 0.5 < self.beta <= 1.0:
            raise InvalidParameterError(f"beta must lie in (0.5, 1], got {self.beta}")

    def rate(self, t: int) -> float:
        return rate(self, t)


def rate(schedule: DecaySchedule, t: int) -> float:
    if int(t) != t or t < 1:
        raise InvalidParameterError(f"iteration must be a positive integer, got {t}")
    return float(schedule.eta0 / float(t) ** schedule.beta)


@dataclass(frozen=True)
class TrainRecord:
    t: int
    eta: float
    nll_batch_pre: float
    nll_batch_post: float
    nll_holdout: Optional[float] = None
    ms: Optional[float] = None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class TrainLog:
    """Per-iteration records; iterations must strictly increase."""

    records: List[TrainRecord] = field(default_factory=list)
    has_holdout: bool = False

    def append(self, rec: TrainRecord) -> None:
        if self.records and rec.t <= self.records[-1].t:
            raise ValueError(f"iteration {rec.t} does not follow {self.records[-1].t}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    @property
    def columns(self):
        return LOG_COLUMNS if self.has_holdout else tuple(c for c in LOG_COLUMNS if c != "nll_holdout")

    def to_csv(self, fh=None) -> str:
        """Write the log as CSV (floats in round-trip ``repr`` form).

        The holdout column is omitted when no holdout was given; ``ms`` is
        left empty unless timing was recorded.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns
        w.writerow(cols)
        for r in self.records:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


class StepError(DivemError):
    """A stepper failed; ``iteration`` says where and ``__cause__`` why."""

    def __init__(self, iteration: int, cause: BaseException):
        super().__init__(f"online step failed at iteration {iteration}: {cause}")
        self.iteration = iteration


def run_online(
    model,
    stream: Iterable,
    schedule: DecaySchedule,
    stepper: Callable,
    nll: Callable,
    holdout=None,
    holdout_every: int = 1,
    record_time: bool = False,
):
    """Apply ``stepper(model, batch, eta)`` to each mini-batch in turn.

    Returns the final model and a :class:`TrainLog` with the batch nll before
    and after each step and, every ``holdout_every`` steps (and at the last),
    the holdout nll.
    """
    if holdout_every < 1:
        raise ValueError("holdout_every must be at least 1")
    has_holdout = holdout is not None and len(holdout) > 0
    log = TrainLog(has_holdout=has_holdout)
    batches = iter(stream)
    try:
        nxt = next(batches)
    except StopIteration:
        raise ValueError("stream is empty") from None
    t = 0
    while nxt is not None:
        batch = nxt
        nxt = next(batches, None)
        t += 1
        eta = rate(schedule, t)
        start = time.perf_counter()
        try:
            pre = nll(model, batch)
            model = stepper(model, batch, eta)
            post = nll(model, batch)
            hold = None
            if has_holdout and (t % holdout_every == 0 or nxt is None):
                hold = nll(model, holdout)
        except Exception as exc:
            raise StepError(t, exc) from exc
        ms = (time.perf_counter() - start) * 1e3 if record_time else None
        log.append(TrainRecord(t, eta, pre, post, hold, ms))
    return model, log
