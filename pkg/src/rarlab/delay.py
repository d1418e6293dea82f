"""Delayed responses: entry and response-time processes and the observed view.

Patient ``j`` (0-based) enters at ``t[j]`` and responds at ``t[j] + r[j]``.
Its outcome is usable for the decision on patient ``m`` (0-based) iff
``t[j] + r[j] <= t[m]``; the *reveal epoch* of ``j`` is the first such ``m``.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class DelayModel:
    """Entry gaps and per-arm response times.

    Defaults are exponential with the given *means* (``entry_mean`` for the
    gaps between arrivals, ``response_mean`` per arm or shared). A mean of
    ``0`` gives immediate responses, ``inf`` responses that never arrive.
    Arbitrary distributions can be plugged in through the samplers, which
    receive ``(rng, shape)`` and return positive times of that shape.
    """

    entry_mean: float = 1.0
    response_mean: float | tuple = 1.0
    entry_sampler: Optional[Callable] = None
    response_sampler: Optional[Callable] = None

    def __post_init__(self):
        if not self.entry_mean > 0:
            raise ValueError("entry gaps must have a positive mean")
        if np.any(np.asarray(self.response_mean, dtype=float) < 0):
            raise ValueError("response-time means must be nonnegative")

    def entry_times(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Arrival times: cumulative gaps along the last axis."""
        if self.entry_sampler is not None:
            gaps = np.asarray(self.entry_sampler(rng, shape), dtype=float)
        else:
            gaps = rng.exponential(self.entry_mean, size=shape)
        return np.cumsum(gaps, axis=-1)

    def response_times(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Response times for every (patient, arm) cell of ``shape = (..., K)``."""
        if self.response_sampler is not None:
            return np.asarray(self.response_sampler(rng, shape), dtype=float)
        mean = np.broadcast_to(np.asarray(self.response_mean, dtype=float), shape[-1:])
        draws = rng.standard_exponential(size=shape)
        with np.errstate(invalid="ignore"):
            out = draws * mean
        # 0 * inf: a never-arriving response stays infinite
        return np.where(np.isinf(mean), np.inf, out)


def delay_probability(entry_mean: float, response_mean: float, lag: int) -> float:
    """P(response of a patient still pending after ``lag`` further arrivals).

    Exponential gaps with mean ``entry_mean`` and exponential response time
    with mean ``response_mean`` give ``(response_mean/(entry_mean+response_mean))**lag``.
    """
    if entry_mean <= 0 or response_mean <= 0:
        raise ValueError("means must be positive")
    if lag < 0 or int(lag) != lag:
        raise ValueError("lag must be a nonnegative integer")
    return (response_mean / (entry_mean + response_mean)) ** int(lag)


@dataclass(frozen=True)
class ObservedView:
    N: np.ndarray
    S: np.ndarray


def observed_view(state, epoch: int | None = None) -> ObservedView:
    """Per-arm count and sum of responses visible before assigning patient
    ``epoch`` (0-based, i.e. the ``epoch + 1``-th patient). ``None`` means the
    infinite horizon: every response of the trial."""
    K = state.n_arms
    arms = np.asarray(state.assignments, dtype=int)
    y = np.asarray(state.responses, dtype=float)
    if epoch is None:
        keep = np.ones(len(arms), dtype=bool)
    else:
        if not 0 <= epoch <= len(arms):
            raise ValueError(f"epoch {epoch} outside 0..{len(arms)}")
        t = np.asarray(state.entry_times, dtype=float)
        r = np.asarray(state.response_times, dtype=float)
        j = np.arange(len(arms))
        keep = (j < epoch) & (t[: len(arms)] + r <= t[epoch])
    N = np.bincount(arms[keep], minlength=K).astype(float)
    S = np.bincount(arms[keep], weights=y[keep], minlength=K)
    return ObservedView(N, S)


def reveal_epochs(entry_times: np.ndarray, j: int, ready: np.ndarray) -> np.ndarray:
    """Reveal epoch of patient ``j`` in every replication.

    ``entry_times`` is (R, n+1) and ``ready`` (R,) holds ``t[j] + r[j]``.
    Returns values in ``j+1 .. n+1``; ``n+1`` means not revealed in the trial.
    """
    R, width = entry_times.shape
    rows = np.arange(R)
    lo = np.full(R, j + 1)
    hi = np.full(R, width)
    # first index m >= j+1 with t[m] >= ready, per row
    while True:
        open_ = lo < hi
        if not open_.any():
            return lo
        mid = (lo + hi) // 2
        hit = entry_times[rows, np.minimum(mid, width - 1)] >= ready
        hi = np.where(open_ & hit, mid, hi)
        lo = np.where(open_ & ~hit, mid + 1, lo)


class RevealQueue:
    """Responses waiting for their reveal epoch."""

    def __init__(self):
        self._slots = defaultdict(list)

    def push(self, epochs, rows, arms, y, inc=None) -> None:
        order = np.argsort(epochs, kind="stable")
        e = epochs[order]
        cuts = np.flatnonzero(np.diff(e)) + 1
        for idx in np.split(order, cuts):
            if len(idx):
                self._slots[int(epochs[idx[0]])].append(
                    (rows[idx], arms[idx], y[idx], None if inc is None else inc[idx]))

    def pop(self, epoch: int):
        items = self._slots.pop(epoch, None)
        if not items:
            return None
        rows = np.concatenate([it[0] for it in items])
        arms = np.concatenate([it[1] for it in items])
        y = np.concatenate([it[2] for it in items])
        inc = None if items[0][3] is None else np.concatenate([it[3] for it in items])
        return rows, arms, y, inc

    def __len__(self):
        return sum(len(it[0]) for items in self._slots.values() for it in items)
