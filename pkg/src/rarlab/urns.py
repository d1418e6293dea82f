"""Urn allocation rules.

Ball counts are real rows ``Y = (Y_1..Y_K)``, optionally preceded by an
immigration slot ``Y_0``. A type is drawn with probability proportional
to its positive part, so types with ``Y_k <= 0`` are never drawn.

Two layers live here: single-trial steps on an :class:`UrnState` (handy for
checking the recursion by hand) and :class:`~rarlab.core.Design`
subclasses that run the same rules over many replications at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import models, targets
from .core import Design, EmptyUrnError, NumericalError, draw_index

MAX_IMMIGRATIONS = 10**6
SERIES_TOL = 1e-14
SIMPLE_GAP = 1e-9

RPW_PRESETS = {"rpw11": (1.0, 1.0), "rpw55": (5.0, 5.0)}


# --------------------------------------------------------------------------
# adding rules


class AddingRule:
    """Ball increments for a draw of arm ``k`` with outcome ``y``.

    ``increments`` is vectorized: ``arms`` and ``y`` are (R,), ``theta_hat``
    (R, K, d) or None; the result is (R, K). ``at_draw`` rules ignore the
    outcome and are applied as soon as the ball is drawn.
    """

    families: tuple = models.FAMILIES
    homogeneous = True
    at_draw = False

    def increments(self, arms, y, theta_hat=None) -> np.ndarray:
        raise NotImplementedError

    def mean_matrix(self, theta) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form mean matrix")


class WeiRule(AddingRule):
    """Success adds one ball of the drawn type; failure spreads one ball
    evenly over the other types. Two arms give the randomized play-the-winner."""

    families = (models.BERNOULLI,)

    def __init__(self, n_arms: int = 2):
        if n_arms < 2:
            raise ValueError("need at least two arms")
        self.n_arms = n_arms

    def increments(self, arms, y, theta_hat=None):
        K = self.n_arms
        R = len(arms)
        fail = (1.0 - np.asarray(y, dtype=float)) / (K - 1)
        out = np.repeat(fail[:, None], K, axis=1)
        out[np.arange(R), arms] = y
        return out

    def mean_matrix(self, theta):
        p = models.as_theta(models.BERNOULLI, theta)[:, 0]
        K = len(p)
        H = np.repeat(((1 - p) / (K - 1))[:, None], K, axis=1)
        np.fill_diagonal(H, p)
        return H

    def __repr__(self):
        return f"WeiRule({self.n_arms})"


def rpw_rule() -> WeiRule:
    return WeiRule(2)


def wei_rule(n_arms: int) -> WeiRule:
    return WeiRule(n_arms)


class CustomRule(AddingRule):
    """Rule from a function ``fn(arms, y, theta_hat) -> (R, K)``.

    ``mean`` optionally gives the generating matrix as a function of theta.
    """

    def __init__(self, fn: Callable, mean: Optional[Callable] = None, homogeneous: bool = True,
                 at_draw: bool = False):
        self.fn, self.mean = fn, mean
        self.homogeneous, self.at_draw = homogeneous, at_draw

    def increments(self, arms, y, theta_hat=None):
        return np.asarray(self.fn(arms, y, theta_hat), dtype=float)

    def mean_matrix(self, theta):
        if self.mean is None:
            return super().mean_matrix(theta)
        return np.asarray(self.mean(theta), dtype=float)


class SEURule(AddingRule):
    """Add ``beta * rho_j(theta_hat)`` balls of every type j at each draw."""

    homogeneous = False
    at_draw = True

    def __init__(self, target: targets.Target, beta: float = 1.0):
        if not beta > 0:
            raise ValueError("beta must be positive")
        self.target, self.beta = target, beta

    def increments(self, arms, y, theta_hat=None):
        if theta_hat is None:
            raise ValueError("SEU increments need current estimates")
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = targets.clamp(self.target.rho(theta_hat))
        return self.beta * rho

    def mean_matrix(self, theta):
        rho = self.target.rho(theta)
        return self.beta * np.tile(rho, (len(rho), 1))


def seu_rule(target: targets.Target, beta: float = 1.0) -> SEURule:
    return SEURule(target, beta)


# --------------------------------------------------------------------------
# single-trial steps


@dataclass(frozen=True)
class UrnState:
    """Treatment balls, plus the immigration count when the urn has one."""

    balls: tuple
    immigration: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "balls", tuple(float(b) for b in self.balls))
        if self.immigration is not None:
            object.__setattr__(self, "immigration", float(self.immigration))

    @property
    def n_arms(self) -> int:
        return len(self.balls)

    def probabilities(self) -> np.ndarray:
        """Draw probabilities of (immigration?, type 1, ..., type K)."""
        w = self._weights()
        total = w.sum()
        if not total > 0:
            raise EmptyUrnError("urn has no positive mass")
        return w / total

    def _weights(self) -> np.ndarray:
        y = np.maximum(np.asarray(self.balls), 0.0)
        if self.immigration is None:
            return y
        return np.concatenate([[max(self.immigration, 0.0)], y])

    def add(self, row) -> "UrnState":
        return UrnState(tuple(np.asarray(self.balls) + np.asarray(row, dtype=float)),
                        self.immigration)


def _draw(urn: UrnState, rng: np.random.Generator) -> int:
    w = urn._weights()[None, :]
    return int(draw_index(w, rng.random(1))[0])


def gpu_step(urn: UrnState, rule: AddingRule, outcome: Callable, rng: np.random.Generator,
             theta_hat=None):
    """Draw a ball (with replacement), treat, add the rule's row.

    ``outcome(arm, rng)`` returns the response of the assigned patient.
    Returns ``(arm, outcome, new urn)``.
    """
    if urn.immigration is not None:
        raise ValueError("gpu_step takes an urn without immigration balls")
    k = _draw(urn, rng)
    y = float(outcome(k, rng))
    th = None if theta_hat is None else np.asarray(theta_hat, dtype=float)[None]
    row = rule.increments(np.array([k]), np.array([y]), th)[0]
    return k, y, urn.add(row)


def imu_step(urn: UrnState, rates, rule: AddingRule, outcome: Callable,
             rng: np.random.Generator, theta_hat=None):
    """One draw from an immigrated urn.

    An immigration draw adds ``rates`` balls and assigns nobody: the result
    is ``(None, None, new urn)``. A treatment draw assigns arm ``k`` and adds
    the rule's row, which may be negative.
    """
    if urn.immigration is None:
        raise ValueError("imu_step needs an immigration slot")
    i = _draw(urn, rng)
    if i == 0:
        return None, None, urn.add(rates)
    k = i - 1
    y = float(outcome(k, rng))
    th = None if theta_hat is None else np.asarray(theta_hat, dtype=float)[None]
    row = rule.increments(np.array([k]), np.array([y]), th)[0]
    return k, y, urn.add(row)


def _loser_rows(arms, y, K):
    out = np.zeros((len(arms), K))
    out[np.arange(len(arms)), arms] = -(1.0 - np.asarray(y, dtype=float))
    return out


def dl_step(urn: UrnState, outcome: Callable, rng: np.random.Generator):
    """Drop-the-loser: a failure removes the drawn ball, a success replaces it;
    an immigration draw adds one ball of every type."""
    K = urn.n_arms
    rule = CustomRule(lambda arms, y, th: _loser_rows(arms, y, K))
    return imu_step(urn, np.ones(K), rule, outcome, rng)


def rru_step(urn: UrnState, reinforcement: Callable, outcome: Callable,
             rng: np.random.Generator):
    """Randomly reinforced urn: add ``reinforcement(arm, y) >= 0`` balls of
    the drawn type only."""
    k = _draw(urn, rng)
    y = float(outcome(k, rng))
    r = float(reinforcement(k, y))
    if r < 0:
        raise ValueError("reinforcement must be nonnegative")
    row = np.zeros(urn.n_arms)
    row[k] = r
    return k, y, urn.add(row)


def run_until_assigned(step: Callable, urn: UrnState, max_draws: int = MAX_IMMIGRATIONS):
    """Repeat an immigrated-urn ``step(urn) -> (arm, y, urn)`` until a patient
    is assigned."""
    for _ in range(max_draws):
        k, y, urn = step(urn)
        if k is not None:
            return k, y, urn
    raise NumericalError(f"no treatment ball drawn in {max_draws} draws")


# --------------------------------------------------------------------------
# eigen-analysis


class SpectralError(ValueError):
    pass


def _jordan_order(H: np.ndarray, mu: complex, tol: float) -> int:
    """Size of the largest Jordan block of ``mu`` (index of H - mu I)."""
    K = H.shape[0]
    A = H - mu * np.eye(K)
    prev = K
    P = np.eye(K, dtype=complex)
    for k in range(1, K + 1):
        P = P @ A
        r = np.linalg.matrix_rank(P, tol=tol)
        if r == prev:
            return k - 1
        prev = r
    return K


def stationary_allocation(H, tol: float = 1e-6):
    """Dominant eigenvalue ``beta``, stationary row vector ``v`` (vH = beta v),
    relative subdominant real part ``lam`` and its Jordan order ``nu``."""
    H = np.asarray(H, dtype=float)
    K = H.shape[0]
    if H.shape != (K, K) or K < 2:
        raise ValueError("H must be a square matrix of order >= 2")
    vals, vecs = np.linalg.eig(H.T)
    i = int(np.argmax(vals.real))
    beta = vals[i]
    others = np.delete(vals, i)
    if abs(beta.imag) > SIMPLE_GAP or not beta.real > 0:
        raise SpectralError("dominant eigenvalue is not real and positive")
    if np.min(np.abs(others - beta)) < SIMPLE_GAP:
        raise SpectralError("dominant eigenvalue is not simple")
    v = vecs[:, i].real
    v = v / v.sum()
    if not np.all(v > 0):
        raise SpectralError("stationary vector is not positive")
    beta = float(beta.real)
    lam = float(others.real.max() / beta)
    scale = max(np.abs(H).max(), 1.0)
    nu = 1
    for mu in others[np.abs(others.real / beta - lam) < tol]:
        nu = max(nu, _jordan_order(H, mu, tol * scale))
    return beta, v, lam, nu


# --------------------------------------------------------------------------
# designs


def _positive(Y):
    return np.maximum(Y, 0.0)


class UrnDesign(Design):
    """Generalized Polya urn driven by an adding rule."""

    name = "gpu"

    def __init__(self, rule: AddingRule, initial=None, n_arms: Optional[int] = None,
                 target: Optional[targets.Target] = None, name: Optional[str] = None):
        self.rule = rule
        if n_arms is None:
            n_arms = getattr(rule, "n_arms", None)
        if n_arms is None and initial is not None:
            n_arms = len(initial)
        self.n_arms = n_arms
        self.initial = None if initial is None else np.asarray(initial, dtype=float)
        self.families = rule.families
        self.target = target
        self.uses_estimates = not rule.homogeneous
        if name:
            self.name = name

    def start(self, sim):
        init = np.ones(sim.K) if self.initial is None else self.initial
        if len(init) != sim.K:
            raise ValueError("initial urn does not match the number of arms")
        self.Y = np.tile(init, (sim.R, 1))

    def _theta_hat(self, sim):
        return sim.theta_hat() if self.uses_estimates else None

    def probabilities(self, sim):
        w = _positive(self.Y)
        total = w.sum(axis=1, keepdims=True)
        if not np.all(total > 0):
            raise EmptyUrnError(f"{self.name}: urn has no positive mass")
        return w / total

    def assign(self, sim, rng):
        w = _positive(self.Y)
        arms = draw_index(w, rng.random(sim.R))
        p = w / w.sum(axis=1, keepdims=True) if sim.track or sim.record else None
        if self.rule.at_draw:
            self.Y += self.rule.increments(arms, None, self._theta_hat(sim))
        return arms, p

    def response_increment(self, sim, arms, y):
        if self.rule.at_draw:
            return None
        return self.rule.increments(arms, y, self._theta_hat(sim))

    def apply_increment(self, sim, rows, inc):
        np.add.at(self.Y, rows, inc)

    def __repr__(self):
        return f"{type(self).__name__}({self.rule!r})"


def rpw(preset: str = "rpw11") -> UrnDesign:
    """Randomized play-the-winner with one of the preset initial urns."""
    return UrnDesign(rpw_rule(), RPW_PRESETS[preset], target=targets.UrnTarget(), name="rpw")


def wei(n_arms: int, initial=None) -> UrnDesign:
    return UrnDesign(wei_rule(n_arms), initial, target=targets.UrnTarget(), name="wei")


class SEUDesign(UrnDesign):
    """Sequential estimation-adjusted urn targeting ``target``."""

    name = "seu"

    def __init__(self, target: targets.Target, beta: float = 1.0, initial=None,
                 n_arms: Optional[int] = None):
        super().__init__(SEURule(target, beta), initial, n_arms, target=target)
        self.families = target.families


class RandomlyReinforcedUrn(UrnDesign):
    """Adds a nonnegative, outcome-driven number of balls of the drawn type.

    ``reinforcement(arms, y)`` defaults to the response itself (one ball per
    success for binary outcomes).
    """

    name = "rru"

    def __init__(self, n_arms: int = 2, initial=None, reinforcement: Optional[Callable] = None):
        self.reinforcement = reinforcement
        rule = CustomRule(self._rows, homogeneous=True)
        super().__init__(rule, initial, n_arms)

    def _rows(self, arms, y, theta_hat):
        r = np.asarray(y if self.reinforcement is None else self.reinforcement(arms, y), dtype=float)
        if np.any(r < 0):
            raise NumericalError("randomly reinforced urn got a negative reinforcement")
        out = np.zeros((len(arms), self.n_arms))
        out[np.arange(len(arms)), arms] = r
        return out


class ImmigratedUrn(Design):
    """Urn with an immigration slot ``Y_0``.

    Drawing the immigration ball returns it, adds ``rates`` balls and draws
    again without assigning anyone. Drawing type k assigns arm k; the rule's
    row is added at the draw (``at_draw`` rules) or when the response arrives.
    ``rates`` is a constant vector or a function of the simulation giving (R, K).
    """

    name = "imu"

    def __init__(self, rule: AddingRule, rates=None, n_arms: Optional[int] = None,
                 immigration: float = 1.0, initial=None, target: Optional[targets.Target] = None,
                 name: Optional[str] = None):
        self.rule = rule
        self.n_arms = n_arms or getattr(rule, "n_arms", None) or (
            len(initial) if initial is not None else None)
        self.rates = rates
        self.y0 = float(immigration)
        self.initial = None if initial is None else np.asarray(initial, dtype=float)
        self.families = rule.families
        self.target = target
        if name:
            self.name = name

    def start(self, sim):
        init = np.ones(sim.K) if self.initial is None else self.initial
        self.Y0 = np.full(sim.R, self.y0)
        self.Y = np.tile(init, (sim.R, 1))

    def immigration_rates(self, sim) -> np.ndarray:
        if self.rates is None:
            return np.ones((sim.R, sim.K))
        if callable(self.rates):
            return np.asarray(self.rates(sim), dtype=float)
        return np.broadcast_to(np.asarray(self.rates, dtype=float), (sim.R, sim.K))

    def _theta_hat(self, sim):
        return sim.theta_hat() if self.uses_estimates else None

    def probabilities(self, sim, a=None):
        """Probability that the next assigned patient gets each arm, summing
        the immigration loop as a series."""
        a = self.immigration_rates(sim) if a is None else a
        Y = self.Y.copy()
        y0 = np.maximum(self.Y0, 0.0)[:, None]
        p = np.zeros_like(Y)
        w = np.ones((sim.R, 1))
        for _ in range(MAX_IMMIGRATIONS):
            pos = _positive(Y)
            total = y0 + pos.sum(axis=1, keepdims=True)
            if not np.all(total > 0):
                raise EmptyUrnError(f"{self.name}: urn has no positive mass")
            p += w * pos / total
            w = w * y0 / total
            if w.max() < SERIES_TOL:
                break
            Y += a
        else:
            raise NumericalError(f"{self.name}: immigration series did not converge")
        return p / p.sum(axis=1, keepdims=True)

    def assign(self, sim, rng):
        R = sim.R
        a = self.immigration_rates(sim)
        p = self.probabilities(sim, a) if sim.track or sim.record else None
        arms = np.full(R, -1)
        todo = np.arange(R)
        for _ in range(MAX_IMMIGRATIONS):
            w = np.concatenate([np.maximum(self.Y0[todo], 0.0)[:, None], _positive(self.Y[todo])],
                               axis=1)
            i = draw_index(w, rng.random(len(todo)))
            hit = i > 0
            arms[todo[hit]] = i[hit] - 1
            back = todo[~hit]
            self.Y[back] += a[back]
            todo = back
            if len(todo) == 0:
                break
        else:
            raise NumericalError(f"{self.name}: no treatment ball drawn in {MAX_IMMIGRATIONS} draws")
        if self.rule.at_draw:
            self.Y += self.rule.increments(arms, None, self._theta_hat(sim))
        return arms, p

    def response_increment(self, sim, arms, y):
        if self.rule.at_draw:
            return None
        return self.rule.increments(arms, y, self._theta_hat(sim))

    def apply_increment(self, sim, rows, inc):
        np.add.at(self.Y, rows, inc)


class _LoserRule(AddingRule):
    """Remove the drawn ball after a failure."""

    families = (models.BERNOULLI,)

    def increments(self, arms, y, theta_hat=None):
        return _loser_rows(arms, y, self.n_arms)


class _DropDrawn(AddingRule):
    """Remove the drawn ball at every draw."""

    at_draw = True

    def increments(self, arms, y, theta_hat=None):
        out = np.zeros((len(arms), self.n_arms))
        out[np.arange(len(arms)), arms] = -1.0
        return out


class DropTheLoser(ImmigratedUrn):
    name = "dl"

    def __init__(self, n_arms: int = 2, immigration: float = 1.0, initial=None):
        rule = _LoserRule()
        rule.n_arms = n_arms
        super().__init__(rule, None, n_arms, immigration, initial, target=targets.UrnTarget())


class GeneralizedDropTheLoser(ImmigratedUrn):
    """Every drawn ball is removed; immigration adds ``beta * rho(theta_hat)``."""

    name = "gdl"
    uses_estimates = True

    def __init__(self, target: targets.Target, beta: float = 1.0, n_arms: int = 2,
                 immigration: float = 1.0, initial=None):
        if not beta > 0:
            raise ValueError("beta must be positive")
        rule = _DropDrawn()
        rule.n_arms = n_arms
        self.beta = beta
        super().__init__(rule, self._target_rates, n_arms, immigration, initial, target=target)
        self.families = target.families

    def _target_rates(self, sim):
        return self.beta * sim.target_hat(self.target)
