"""Evaluation: selection bias, lack of randomness, Wald tests, empirical
allocation moments and the closed-form asymptotic variances."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import models, targets
from .models import BERNOULLI

SQRT_8_OVER_PI = math.sqrt(8.0 / math.pi)


@dataclass
class ReplicationSummary:
    """Per-replication outcomes of a Monte Carlo run.

    Every array field has one row per replication; merging concatenates rows,
    so ``merge`` is associative and matches summarising the pooled runs.
    """

    n: int
    proportions: np.ndarray
    guess_rate: Optional[np.ndarray]
    correct_guesses: Optional[np.ndarray]
    mlr: Optional[np.ndarray]
    failures: np.ndarray
    z: np.ndarray
    pending: np.ndarray
    band: np.ndarray
    trace: Optional[np.ndarray] = None

    @property
    def reps(self) -> int:
        return self.proportions.shape[0]

    @classmethod
    def concat(cls, parts) -> "ReplicationSummary":
        parts = list(parts)
        if len({p.n for p in parts}) != 1:
            raise ValueError("cannot merge summaries of different sample sizes")
        out = {"n": parts[0].n}
        for f in fields(cls):
            if f.name == "n":
                continue
            vals = [getattr(p, f.name) for p in parts]
            out[f.name] = None if any(v is None for v in vals) else np.concatenate(vals)
        return cls(**out)

    def merge(self, other: "ReplicationSummary") -> "ReplicationSummary":
        return ReplicationSummary.concat([self, other])

    def selection_bias(self) -> float:
        return float(np.mean(self.guess_rate))

    def mean_mlr(self) -> float:
        return float(np.mean(self.mlr))

    def moments(self, rho1: float) -> "Moments":
        return empirical_moments(self.proportions[:, 0], self.n, rho1, self.failures)

    def power(self, level: float = 0.05) -> float:
        crit = norm.ppf(1 - level / 2)
        return float(np.mean(np.abs(self.z) > crit))


# --------------------------------------------------------------------------
# randomness measures


def selection_bias(trace) -> float:
    """Expected fraction of correct guesses when guessing the arm with the
    largest allocation probability. ``trace`` is (n, K) or (R, n, K)."""
    p = np.asarray(trace, dtype=float)
    return float(p.max(axis=-1).mean())


def mlr(trace, rho) -> float:
    """Mean absolute deviation of allocation probabilities from the target."""
    p = np.asarray(trace, dtype=float)
    return float(np.abs(p - np.asarray(rho, dtype=float)).mean())


def sb_limit_lower(rho) -> float:
    """Smallest attainable asymptotic selection bias for a target."""
    return float(np.max(rho))


def sb_limit_erade(alpha: float, rho1: float) -> float:
    """Asymptotic selection bias of the two-arm discrete ERADE."""
    top = max(rho1, 1 - rho1)
    if top <= 1 / (2 * alpha) if alpha > 0 else True:
        return 1 - 2 * alpha * rho1 * (1 - rho1)
    return top


def mlr_limit_erade(alpha: float, rho1: float) -> float:
    return 2 * (1 - alpha) * rho1 * (1 - rho1)


def sqrt_n_mlr_limit_dbcd(gamma: float, rho1: float, var_lb: float) -> float:
    s2 = (gamma**2 * rho1 * (1 - rho1) + (1 + gamma) ** 2 * var_lb) / (1 + 2 * gamma)
    return SQRT_8_OVER_PI * math.sqrt(s2)


def sqrt_n_mlr_limit_rpw(p1: float, p2: float) -> float:
    s = (1 - p1) + (1 - p2)
    if s <= 0.5:
        return math.inf
    return SQRT_8_OVER_PI * math.sqrt((1 - p1) * (1 - p2) / ((2 * s - 1) * s * s))


# --------------------------------------------------------------------------
# Wald tests


def wald_statistic(stats: models.EstimatorState, family: str) -> np.ndarray:
    """Two-arm Wald statistic for every row of ``stats``; NaN where an arm is empty."""
    N, S, Q = stats.N, stats.S, stats.Q
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = S / N
        if family == BERNOULLI:
            var = mean * (1 - mean)
        else:
            var = (Q - N * mean * mean) / (N - 1)
        se2 = (var / N)[..., 0] + (var / N)[..., 1]
        diff = mean[..., 0] - mean[..., 1]
        z = diff / np.sqrt(se2)
        z = np.where((se2 == 0) & (diff == 0), 0.0, z)
        z = np.where((se2 == 0) & (diff != 0), np.sign(diff) * np.inf, z)
    bad = np.any(N <= (0 if family == BERNOULLI else 1), axis=-1)
    return np.where(bad, np.nan, z)


def wald_test(stats: models.EstimatorState, family: str, level: float = 0.05):
    """(Z, reject) for one trial's per-arm statistics."""
    N = np.asarray(stats.N)
    need = 1 if family == BERNOULLI else 2
    if np.any(N < need):
        raise ValueError("Wald test undefined: an arm has too few observations")
    z = float(wald_statistic(stats, family))
    return z, bool(abs(z) > norm.ppf(1 - level / 2))


# --------------------------------------------------------------------------
# empirical moments


@dataclass(frozen=True)
class Moments:
    mean: float
    bias: float
    variance: float
    variance_se: float
    mse: float
    mean_failures: float


def jackknife_variance_se(x) -> float:
    """Jackknife standard error of the unbiased sample variance."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 3:
        return math.nan
    d2 = (x - x.mean()) ** 2
    ss = d2.sum()
    loo = (ss - n / (n - 1) * d2) / (n - 2)
    return float(math.sqrt((n - 1) / n * ((loo - loo.mean()) ** 2).sum()))


def empirical_moments(prop1, n: int, rho1: float, failures=None) -> Moments:
    """Moments of sqrt(n)(N_{n,1}/n - rho1) across replications."""
    x = np.sqrt(n) * (np.asarray(prop1, dtype=float) - rho1)
    var = float(np.var(x, ddof=1)) if len(x) > 1 else math.nan
    return Moments(
        mean=float(np.mean(prop1)),
        bias=float(np.mean(prop1) - rho1),
        variance=var,
        variance_se=jackknife_variance_se(x),
        mse=float(np.mean(x * x)),
        mean_failures=float(np.mean(failures)) if failures is not None else math.nan,
    )


# --------------------------------------------------------------------------
# closed-form asymptotic variances


def rpw_regime(p1: float, p2: float) -> str:
    s = p1 + p2
    if math.isclose(s, 1.5, rel_tol=0, abs_tol=1e-12):
        return "log"
    return "normal" if s < 1.5 else "non-normal"


def urn_target_variance(design: str, p1: float, p2: float, gamma: float = 0.0,
                    rpw: str = "corollary") -> float:
    """Binary two-arm variances for the urn target q2/(q1+q2), in closed form.

    ``rpw="corollary"`` uses numerator 5-2(q1+q2) (derived from the
    Gaussian approximation); ``rpw="table"`` the tabulated 3+2(p1+p2).
    """
    q1, q2 = 1 - p1, 1 - p2
    s, t = q1 + q2, p1 + p2
    base = q1 * q2 / s**3
    if design == "rpw":
        if s <= 0.5:
            return math.inf
        num = 5 - 2 * s if rpw == "corollary" else 3 + 2 * t
        return q1 * q2 * num / ((2 * s - 1) * s * s)
    if design == "dl":
        return base * t
    if design == "smlp":
        return base * (2 + t)
    if design == "seu":
        return base * (2 + 5 * t)
    if design == "gdl":
        return 2 * base * t
    if design == "dbcd":
        return base * (2 + (1 + 2 * gamma) * t) / (1 + 2 * gamma)
    raise ValueError(f"unknown design {design!r}")


def reference_variance(design: str, family: str, theta, target=None, gamma: float = 0.0,
                       rpw: str = "corollary"):
    """Asymptotic covariance of sqrt(n)(N_n/n - rho) for ``design``.

    Returns the (1,1) entry for two arms and the full matrix otherwise;
    ``math.inf`` flags the RPW regimes without a sqrt(n) normal limit.
    """
    theta = models.as_theta(family, theta)
    K = theta.shape[0]
    if design in ("rpw", "dl"):
        if family != BERNOULLI:
            raise ValueError(f"{design} needs binary responses")
        p = theta[:, 0]
        if design == "rpw":
            if K != 2:
                raise ValueError("RPW variance is tabulated for two arms")
            if rpw_regime(p[0], p[1]) != "normal":
                return math.inf
            return urn_target_variance("rpw", p[0], p[1], rpw=rpw)
        cov = targets.dl_covariance(p)
        return float(cov[0, 0]) if K == 2 else cov
    if design == "cr":
        u = np.full(K, 1.0 / K)
        cov = np.diag(u) - np.outer(u, u)
        return float(cov[0, 0]) if K == 2 else cov
    if target is None:
        raise ValueError(f"{design} needs a target")
    rho = np.asarray(target.rho(theta), dtype=float)
    lb = targets.sigma_lb(target, family, theta)
    s1 = np.diag(rho) - np.outer(rho, rho)
    if design in ("lb", "erade", "serade"):
        cov = lb
    elif design == "gdl":
        cov = 2 * lb
    elif design == "smlp":
        cov = s1 + 2 * lb
    elif design == "seu":
        cov = s1 + 6 * lb
    elif design == "dbcd":
        cov = lb + (s1 + lb) / (1 + 2 * gamma)
    else:
        raise ValueError(f"unknown design {design!r}")
    return float(cov[0, 0]) if K == 2 else cov
