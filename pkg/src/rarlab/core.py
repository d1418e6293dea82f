"""Sequential trial engine.

A :class:`Simulation` advances ``reps`` independent trials in lockstep, one
patient per :meth:`Simulation.step`. A single trial is the ``reps=1`` case,
so interactive use and the Monte Carlo harness share one code path.

Randomness: a master seed and a chunk index define three independent
streams (assignment draws, responses, delays). Responses are drawn for
every arm of every patient, so the response stream never depends on which
design is being run.
"""
from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models, targets
from .delay import DelayModel, RevealQueue, reveal_epochs
from .metrics import ReplicationSummary
from .models import EstimatorState, ResponseModel

ASSIGN, RESPONSE, DELAY = 0, 1, 2
CHUNK_SIZE = 1000
PROB_TOL = 1e-12

WARM_MODES = ("restricted-block", "fixed-guess", "bayes-shrinkage")


class NumericalError(RuntimeError):
    """A design produced an invalid probability vector or could not draw."""


class EmptyUrnError(NumericalError):
    pass


def streams(seed: int, chunk: int = 0) -> dict[int, np.random.Generator]:
    return {
        s: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk, s)))
        for s in (ASSIGN, RESPONSE, DELAY)
    }


def draw_index(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Pick a column per row with probability proportional to its
    (nonnegative) weight, using one uniform per row.

    Zero-weight columns are never returned. Rows without positive weight
    raise :class:`EmptyUrnError`.
    """
    cum = np.cumsum(weights, axis=1)
    total = cum[:, -1]
    if not np.all(total > 0):
        raise EmptyUrnError("no positive mass to draw from")
    idx = (cum <= (u * total)[:, None]).sum(axis=1)
    last = weights.shape[1] - 1 - np.argmax(weights[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def draw_arm(p, rng: np.random.Generator) -> int:
    """Single draw from a probability vector."""
    p = np.asarray(p, dtype=float)[None, :]
    return int(draw_index(p, rng.random(1))[0])


@dataclass(frozen=True)
class WarmStart:
    """How a design starts before estimates are available.

    ``restricted-block`` assigns ``m0`` permuted blocks of all arms first;
    ``fixed-guess`` uses ``theta0`` for arms with no observations;
    ``bayes-shrinkage`` starts adapting at once from the estimator's prior centre.
    """

    mode: str = "restricted-block"
    m0: int = 1
    theta0: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in WARM_MODES:
            raise ValueError(f"unknown warm-start mode {self.mode!r}")
        if self.m0 < 1:
            raise ValueError("m0 must be a positive integer")
        if self.mode == "fixed-guess" and self.theta0 is None:
            raise ValueError("fixed-guess warm start needs theta0")


class Design:
    """Allocation rule. Subclasses set the class attributes and implement
    :meth:`probabilities`, or override :meth:`assign` for urn draws.

    Per-run state is created in :meth:`start`; the engine deep-copies the
    design for every run, so instances can be reused as configurations.
    """

    name = "design"
    n_arms: Optional[int] = None
    families: tuple = models.FAMILIES
    #: warm start (restricted block or guesses) applies to estimate-driven rules
    uses_estimates = False
    #: needs responses as soon as the patient is treated
    needs_immediate = False
    target: Optional[targets.Target] = None

    def check(self, model: ResponseModel) -> None:
        if self.n_arms is not None and self.n_arms != model.n_arms:
            raise ValueError(
                f"{self.name} is configured for {self.n_arms} arms, model has {model.n_arms}")
        if model.family not in self.families:
            raise ValueError(f"{self.name} does not support {model.family} responses")
        if self.target is not None:
            self.target.check(model.family, model.n_arms)

    def start(self, sim: "Simulation") -> None:
        pass

    def probabilities(self, sim: "Simulation") -> np.ndarray:
        raise NotImplementedError

    def assign(self, sim: "Simulation", rng: np.random.Generator):
        """Return ``(arms, probs)``; ``probs`` may be None when not tracked."""
        p = self.probabilities(sim)
        return draw_index(p, rng.random(sim.R)), p

    def response_increment(self, sim, arms, y) -> Optional[np.ndarray]:
        """State change caused by a response, applied when it is revealed."""
        return None

    def apply_increment(self, sim, rows, inc) -> None:
        pass

    #: estimated target used for the current decision, set by target-driven designs
    last_target: Optional[np.ndarray] = None

    def __repr__(self):
        return f"{type(self).__name__}()"


class CompleteRandomization(Design):
    name = "cr"

    def __init__(self, n_arms: int = 2):
        self.n_arms = n_arms

    def probabilities(self, sim):
        return np.full((sim.R, sim.K), 1.0 / sim.K)


class PlayTheWinner(Design):
    """Deterministic rule: stay after a success, switch after a failure."""

    name = "pw"
    n_arms = 2
    families = (models.BERNOULLI,)
    needs_immediate = True

    def probabilities(self, sim):
        if sim.m == 0:
            return np.full((sim.R, 2), 0.5)
        stay = sim.last_response > 0.5
        nxt = np.where(stay, sim.last_arm, 1 - sim.last_arm)
        p = np.zeros((sim.R, 2))
        p[np.arange(sim.R), nxt] = 1.0
        return p


@dataclass
class TrialState:
    """History of one trial."""

    n_arms: int
    assignments: np.ndarray
    responses: np.ndarray
    entry_times: np.ndarray
    response_times: np.ndarray
    probabilities: np.ndarray
    reveal_epochs: np.ndarray
    estimated_targets: Optional[np.ndarray] = None

    @property
    def step(self) -> int:
        return len(self.assignments)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_arms)

    def check(self) -> None:
        c = self.counts
        assert c.sum() == self.step and np.all(c >= 0)
        assert np.all(np.diff(self.entry_times) >= 0)
        p = self.probabilities
        assert np.all(p >= 0) and np.all(p <= 1)
        assert np.allclose(p.sum(axis=1), 1.0, atol=PROB_TOL, rtol=0)


class Simulation:
    """``reps`` trials of ``n`` patients advanced together."""

    def __init__(
        self,
        design: Design,
        model: ResponseModel,
        n: int,
        reps: int = 1,
        warm: Optional[WarmStart] = None,
        delay: Optional[DelayModel] = None,
        seed: int = 0,
        chunk: int = 0,
        estimator: str = "shrinkage",
        track: bool = True,
        record: bool = False,
    ):
        if n < 1:
            raise ValueError("sample size must be positive")
        if model.n_arms < 2:
            raise ValueError("need at least two arms")
        if estimator not in ("shrinkage", "mle"):
            raise ValueError(f"unknown estimator {estimator!r}")
        design = copy.deepcopy(design)
        design.check(model)
        if delay is not None and design.needs_immediate:
            raise ValueError(f"{design.name} needs immediate responses")
        warm = warm or WarmStart()
        self.design, self.model, self.n, self.R = design, model, n, reps
        self.K = K = model.n_arms
        self.warm, self.delay = warm, delay
        self.mle = estimator == "mle"
        self.track, self.record = track, record
        self.guess = warm.theta0 if warm.mode == "fixed-guess" else None
        self._rng = streams(seed, chunk)

        self.m = 0
        self.counts = np.zeros((reps, K), dtype=np.int64)
        self.full = EstimatorState.zeros((reps, K))
        self.obs = self.full if delay is None else EstimatorState.zeros((reps, K))
        self.failures = np.zeros(reps)
        self.last_arm = np.zeros(reps, dtype=np.int64)
        self.last_response = np.zeros(reps)
        self._cache: dict = {}

        self.block = None
        if design.uses_estimates and warm.mode == "restricted-block":
            if n < K * warm.m0:
                raise ValueError(f"n={n} smaller than the warm-start block {K * warm.m0}")
            base = np.tile(np.arange(K), (reps, 1))
            self.block = np.concatenate(
                [self._rng[ASSIGN].permuted(base, axis=1) for _ in range(warm.m0)], axis=1)

        if delay is not None:
            self.entry = delay.entry_times(self._rng[DELAY], (reps, n + 1))
            self.queue = RevealQueue()

        rho = None
        if design.target is not None:
            rho = targets.clamp(design.target.rho(model.theta))
        self.true_target = rho
        self.sb_sum = np.zeros(reps)
        self.hits = np.zeros(reps)
        self.mlr_sum = np.zeros(reps) if rho is not None else None
        self.band = np.zeros(reps)
        if record:
            self.trace_arm = np.zeros((reps, n), dtype=np.int64)
            self.trace_y = np.zeros((reps, n))
            self.trace_p = np.full((reps, n, K), np.nan)
            self.trace_rt = np.zeros((reps, n))
            self.trace_epoch = np.zeros((reps, n), dtype=np.int64)
            self.trace_target = np.full((reps, n, K), np.nan)
        design.start(self)

    # ---- views for designs -------------------------------------------------

    def theta_hat(self) -> np.ndarray:
        key = ("theta", self.m)
        if key not in self._cache:
            self._cache = {}
            self._cache[key] = models.estimate(self.obs, self.model.family, self.guess, self.mle)
        return self._cache[key]

    def target_hat(self, target: targets.Target) -> np.ndarray:
        key = ("target", self.m, id(target))
        if key not in self._cache:
            with np.errstate(divide="ignore", invalid="ignore"):
                raw = target.rho(self.theta_hat())
            self._cache[key] = targets.clamp(raw)
        return self._cache[key]

    @property
    def proportions(self) -> np.ndarray:
        return self.counts / max(self.m, 1)

    # ---- stepping ----------------------------------------------------------

    def step(self) -> np.ndarray:
        """Assign the next patient in every replication; returns the arms."""
        if self.m >= self.n:
            raise RuntimeError("trial already complete")
        m, R, K = self.m, self.R, self.K
        design = self.design
        rows = np.arange(R)
        if self.delay is not None:
            self._reveal(m)

        design.last_target = None
        if self.block is not None and m < self.block.shape[1]:
            arms = self.block[:, m]
            pos = m % K
            left = np.ones((R, K), dtype=bool)
            start = m - pos
            for i in range(start, m):
                left[rows, self.block[:, i]] = False
            p = left / (K - pos)
            in_block = True
        else:
            arms, p = design.assign(self, self._rng[ASSIGN])
            in_block = False
        if p is not None:
            self._check_probabilities(p)
        if design.last_target is not None and m > 0:
            band = np.abs(self.counts - m * design.last_target).max(axis=1)
            self.band = np.maximum(self.band, band)

        xi = self.model.sample(self._rng[RESPONSE], R)
        y = xi[rows, arms]
        self.counts[rows, arms] += 1
        self.full.add(rows, arms, y)
        if self.model.family == models.BERNOULLI:
            self.failures += 1.0 - y
        inc = None if in_block else design.response_increment(self, arms, y)

        if self.delay is not None:
            rt_all = self.delay.response_times(self._rng[DELAY], (R, K))
            rt = rt_all[rows, arms]
            epochs = reveal_epochs(self.entry, m, self.entry[:, m] + rt)
            inside = epochs <= self.n
            if inside.any():
                sel = np.flatnonzero(inside)
                self.queue.push(epochs[sel], sel, arms[sel], y[sel],
                                None if inc is None else inc[sel])
        elif inc is not None:
            design.apply_increment(self, rows, inc)

        if self.track and p is not None:
            self.sb_sum += p.max(axis=1)
            self.hits += p[rows, arms] == p.max(axis=1)
            if self.mlr_sum is not None:
                self.mlr_sum += np.abs(p - self.true_target).mean(axis=1)
        if self.record:
            self.trace_arm[:, m] = arms
            self.trace_y[:, m] = y
            if p is not None:
                self.trace_p[:, m] = p
            if self.delay is not None:
                self.trace_rt[:, m] = rt
                self.trace_epoch[:, m] = epochs
            else:
                self.trace_epoch[:, m] = m + 1
            if design.last_target is not None:
                self.trace_target[:, m] = design.last_target
        self.last_arm, self.last_response = arms, y
        self.m += 1
        return arms

    def _reveal(self, m: int) -> None:
        got = self.queue.pop(m)
        if got is None:
            return
        rows, arms, y, inc = got
        self.obs.add(rows, arms, y)
        if inc is not None:
            self.design.apply_increment(self, rows, inc)
        self._cache = {}

    def _check_probabilities(self, p: np.ndarray) -> None:
        ok = (np.all(np.isfinite(p)) and np.all(p >= 0) and np.all(p <= 1)
              and np.all(np.abs(p.sum(axis=1) - 1.0) <= PROB_TOL))
        if not ok:
            raise NumericalError(
                f"{self.design.name} produced an invalid probability vector at step {self.m + 1}")

    def run(self) -> "Simulation":
        while self.m < self.n:
            self.step()
        return self

    # ---- results -----------------------------------------------------------

    def observed_counts(self, epoch: Optional[int] = None) -> np.ndarray:
        """Observed per-arm response counts before patient ``epoch`` (defaults
        to the next one); without delays this equals the assignment counts."""
        if self.delay is None:
            return self.counts.astype(float)
        if epoch is None or epoch == self.m:
            return self.obs.N.copy()
        raise ValueError("only the current epoch is available; use delay.observed_view on a trace")

    def summary(self) -> ReplicationSummary:
        m = max(self.m, 1)
        mlr = self.mlr_sum / m if self.mlr_sum is not None else None
        from .metrics import wald_statistic
        z = wald_statistic(self.full, self.model.family)
        return ReplicationSummary(
            n=self.m,
            proportions=self.counts / m,
            guess_rate=self.sb_sum / m if self.track else None,
            correct_guesses=self.hits / m if self.track else None,
            mlr=mlr,
            failures=self.failures.copy(),
            z=z,
            pending=(self.counts - self.obs.N) if self.delay is not None else np.zeros((self.R, self.K)),
            band=self.band.copy(),
            trace=self.trace_p.copy() if self.record else None,
        )

    def trial_state(self, r: int = 0) -> TrialState:
        if not self.record:
            raise RuntimeError("trial states need record=True")
        m = self.m
        entry = self.entry[r, : m + 1] if self.delay is not None else np.arange(m + 1, dtype=float)
        return TrialState(
            n_arms=self.K,
            assignments=self.trace_arm[r, :m].copy(),
            responses=self.trace_y[r, :m].copy(),
            entry_times=entry.copy(),
            response_times=self.trace_rt[r, :m].copy(),
            probabilities=self.trace_p[r, :m].copy(),
            reveal_epochs=self.trace_epoch[r, :m].copy(),
            estimated_targets=self.trace_target[r, :m].copy(),
        )


def run_trial(design: Design, model: ResponseModel, n: int, warm: Optional[WarmStart] = None,
              delay: Optional[DelayModel] = None, seed: int = 0, estimator: str = "shrinkage") -> TrialState:
    """Run one trial and return its full history."""
    sim = Simulation(design, model, n, reps=1, warm=warm, delay=delay, seed=seed,
                     estimator=estimator, record=True)
    return sim.run().trial_state(0)


def _run_chunk(args) -> ReplicationSummary:
    design, model, n, reps, warm, delay, seed, chunk, estimator, track, record = args
    sim = Simulation(design, model, n, reps=reps, warm=warm, delay=delay, seed=seed,
                     chunk=chunk, estimator=estimator, track=track, record=record)
    return sim.run().summary()


def simulate(
    design: Design,
    model: ResponseModel,
    n: int,
    reps: int,
    warm: Optional[WarmStart] = None,
    delay: Optional[DelayModel] = None,
    seed: int = 0,
    estimator: str = "shrinkage",
    track: bool = True,
    record: bool = False,
    jobs: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> ReplicationSummary:
    """Monte Carlo over ``reps`` trials. Replications are split into chunks
    of ``chunk_size`` with their own streams, so results do not depend on
    ``jobs``."""
    if reps < 1:
        raise ValueError("reps must be positive")
    sizes = [min(chunk_size, reps - s) for s in range(0, reps, chunk_size)]
    tasks = [(design, model, n, size, warm, delay, seed, c, estimator, track, record)
             for c, size in enumerate(sizes)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]
    return ReplicationSummary.concat(parts)
