"""Biased-coin allocation: the probability of each arm is a function of the
current proportions and the estimated target."""
from __future__ import annotations

import numpy as np
from scipy.special import gammaln, logsumexp

from . import models, targets
from .core import Design, NumericalError

EQUAL_TOL = 1e-12


def smlp_prob(rho_hat) -> np.ndarray:
    return np.asarray(rho_hat, dtype=float).copy()


def dbcd_prob(x, y, gamma: float = 2.0) -> np.ndarray:
    """g_k = y_k (y_k/x_k)^gamma, normalised over arms (last axis)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0:
        return y / y.sum(axis=-1, keepdims=True)
    if np.any(x <= 0):
        raise NumericalError("DBCD needs every arm to have been allocated")
    w = y * (y / x) ** gamma
    return w / w.sum(axis=-1, keepdims=True)


def erade_prob(x1, rho1, alpha: float = 0.5):
    """Probability of arm 1 for the two-arm discrete ERADE."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    x1 = np.asarray(x1, dtype=float)
    rho1 = np.asarray(rho1, dtype=float)
    out = np.where(x1 > rho1, alpha * rho1, 1 - alpha * (1 - rho1))
    out = np.where(np.abs(x1 - rho1) <= EQUAL_TOL, rho1, out)
    return out if out.ndim else float(out)


def psi(t, gamma: float):
    """Weight 1 + sqrt(max(t^(2 gamma) - 1, 0)): flat for t <= 1."""
    t = np.asarray(t, dtype=float)
    with np.errstate(over="ignore"):
        return 1 + np.sqrt(np.maximum(t ** (2 * gamma) - 1, 0))


def smoothed_erade_prob(x, y, gamma: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0):
        raise NumericalError("smoothed ERADE needs every arm to have been allocated")
    w = y * psi(y / x, gamma)
    return w / w.sum(axis=-1, keepdims=True)


def _log_choose(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def thompson_posterior(s1, s2, n1, n2):
    """P(p1 > p2 | data) under independent uniform priors.

    Sum over a = 0..S1 of C(S1+S2-a, S2) C(F1+F2+1+a, F2), over
    C(N1+N2+2, N2+1), with F = N - S, evaluated in log space. Broadcasts.
    """
    s1, s2, n1, n2 = np.broadcast_arrays(*(np.asarray(v, dtype=np.int64) for v in (s1, s2, n1, n2)))
    if np.any((s1 < 0) | (s2 < 0) | (s1 > n1) | (s2 > n2)):
        raise ValueError("need 0 <= S_k <= N_k")
    f1, f2 = n1 - s1, n2 - s2
    a = np.arange(int(s1.max(initial=0)) + 1)
    shape = s1.shape + (1,)
    S1, S2, F1, F2 = (v.reshape(shape) for v in (s1, s2, f1, f2))
    with np.errstate(invalid="ignore"):
        terms = _log_choose(S1 + S2 - a, S2) + _log_choose(F1 + F2 + 1 + a, F2)
    terms = np.where(a <= S1, terms, -np.inf)
    out = np.exp(logsumexp(terms, axis=-1) - _log_choose(n1 + n2 + 2, n2 + 1))
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def thall_wathen_prob(p_hat, c):
    p_hat = np.asarray(p_hat, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any((p_hat < 0) | (p_hat > 1)) or np.any(c < 0):
        raise ValueError("need P in [0, 1] and c >= 0")
    with np.errstate(divide="ignore"):
        # log-odds form avoids 0**0 and underflow for extreme P
        z = c * (np.log(p_hat) - np.log1p(-p_hat))
    z = np.where(c == 0, 0.0, z)
    out = 1 / (1 + np.exp(-z))
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# designs


class CoinDesign(Design):
    """Shared plumbing: estimated target and current proportions."""

    uses_estimates = True

    def __init__(self, target: targets.Target):
        self.target = target
        self.families = target.families
        self.n_arms = target.n_arms

    def probabilities(self, sim):
        rho = sim.target_hat(self.target)
        self.last_target = rho
        if sim.m == 0:
            return rho.copy()
        x = sim.counts / sim.m
        empty = np.any(sim.counts == 0, axis=1)
        if not empty.any():
            return self.allocate(x, rho)
        # arms never tried yet (no restricted block): share among them evenly
        p = np.empty_like(rho)
        fresh = sim.counts[empty] == 0
        p[empty] = fresh / fresh.sum(axis=1, keepdims=True)
        if (~empty).any():
            p[~empty] = self.allocate(x[~empty], rho[~empty])
        return p

    def allocate(self, x, rho):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.target!r})"


class SMLP(CoinDesign):
    name = "smlp"

    def probabilities(self, sim):
        rho = sim.target_hat(self.target)
        self.last_target = rho
        return smlp_prob(rho)


class DBCD(CoinDesign):
    name = "dbcd"

    def __init__(self, target: targets.Target, gamma: float = 2.0):
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        super().__init__(target)
        self.gamma = gamma

    def allocate(self, x, rho):
        return dbcd_prob(x, rho, self.gamma)


class ERADE(CoinDesign):
    """Two-arm efficient randomized-adaptive design."""

    name = "erade"
    n_arms = 2

    def __init__(self, target: targets.Target, alpha: float = 0.5):
        if not 0 <= alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        super().__init__(target)
        self.n_arms = 2
        self.alpha = alpha

    def allocate(self, x, rho):
        p1 = erade_prob(x[:, 0], rho[:, 0], self.alpha)
        return np.column_stack([p1, 1 - p1])


class SmoothedERADE(CoinDesign):
    name = "serade"

    def __init__(self, target: targets.Target, gamma: float = 1.0):
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        super().__init__(target)
        self.gamma = gamma

    def allocate(self, x, rho):
        return smoothed_erade_prob(x, rho, self.gamma)


class ThompsonThallWathen(Design):
    """Tempered posterior probability that arm 1 is better, with exponent
    c = (N1 + N2) / (2 * horizon) computed from the observed responses."""

    name = "thompson"
    n_arms = 2
    families = (models.BERNOULLI,)

    def __init__(self, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be a positive integer")
        self.horizon = int(horizon)

    def probabilities(self, sim):
        N = np.rint(sim.obs.N).astype(np.int64)
        S = np.rint(sim.obs.S).astype(np.int64)
        post = thompson_posterior(S[:, 0], S[:, 1], N[:, 0], N[:, 1])
        c = N.sum(axis=1) / (2.0 * self.horizon)
        p1 = np.atleast_1d(thall_wathen_prob(post, c))
        return np.column_stack([p1, 1 - p1])
