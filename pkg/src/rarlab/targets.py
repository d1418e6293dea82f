"""Target allocations rho(theta), their Jacobians and the efficiency lower bound.

A target maps parameters of shape ``(..., K, d)`` to proportions of shape
``(..., K)``. Jacobians follow the ``(d rho_k / d theta_j)`` layout: one row per
flattened parameter (arm-major), one column per arm.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from . import models
from .models import BERNOULLI, EXPONENTIAL, NORMAL

CLAMP_FLOOR = 0.01


class ConvergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# scalar closed forms


def urn_target(q) -> np.ndarray:
    """(1/q_k) / sum_j (1/q_j) for a vector of failure rates."""
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("failure rates must lie strictly inside (0, 1)")
    s = 1.0 / q
    return s / s.sum()


def neyman_target(family: str, theta) -> float:
    """Neyman proportion for arm 1: sd_1 / (sd_1 + sd_2)."""
    theta = models.as_theta(family, theta)
    if theta.shape[0] != 2:
        raise ValueError("Neyman allocation is defined for two arms")
    sd = _sd(family, theta)
    if np.any(sd <= 0):
        raise ValueError("Neyman allocation needs positive standard deviations")
    return float(sd[0] / (sd[0] + sd[1]))


def rsihr_target(p1: float, p2: float) -> float:
    if not (0 < p1 < 1 and 0 < p2 < 1):
        raise ValueError("success probabilities must lie strictly inside (0, 1)")
    return math.sqrt(p1) / (math.sqrt(p1) + math.sqrt(p2))


def zr_normal_target(mu, sigma) -> float:
    """Normal-outcome allocation minimising expected total response at fixed power."""
    (m1, m2), (s1, s2) = mu, sigma
    if m1 <= 0 or m2 <= 0:
        raise ValueError("means must be positive")
    if s1 <= 0 or s2 <= 0:
        raise ValueError("standard deviations must be positive")
    a, b = math.sqrt(m2) * s1, math.sqrt(m1) * s2
    return a / (a + b)


def bm_target(mu, sigma, c: float, form: str = "symmetric") -> float:
    """Allocation minimising the expected number of responses above ``c``.

    ``form="printed"`` weights the second denominator term by sigma_1 instead
    of sigma_2, so the spreads cancel out of the allocation.
    """
    (m1, m2), (s1, s2) = mu, sigma
    if s1 <= 0 or s2 <= 0:
        raise ValueError("standard deviations must be positive")
    f1 = math.sqrt(ndtr((m1 - c) / s1))
    f2 = math.sqrt(ndtr((m2 - c) / s2))
    a = f2 * s1
    b = f1 * (s2 if form == "symmetric" else s1)
    return a / (a + b)


def lagrange_two_arm(u: float, v: float, sigma1: float, sigma2: float) -> float:
    """Minimiser of u*n1 + v*n2 subject to a fixed Wald-test variance."""
    if u <= 0 or v <= 0:
        raise ValueError("cost weights must be positive")
    a, b = sigma1 / math.sqrt(u), sigma2 / math.sqrt(v)
    return a / (a + b)


# --------------------------------------------------------------------------
# target objects used by the designs


def _sd(family, theta):
    if family == BERNOULLI:
        p = theta[..., 0]
        return np.sqrt(p * (1 - p))
    if family == NORMAL:
        return np.sqrt(theta[..., 1])
    return 1.0 / theta[..., 0]


class Target:
    """Base class. Subclasses implement :meth:`rho`; :meth:`jacobian` falls
    back to central differences."""

    name = "target"
    families: tuple = models.FAMILIES
    n_arms: int | None = None

    def rho(self, theta) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, theta) -> np.ndarray:
        return self.rho(theta)

    def check(self, family: str, n_arms: int) -> None:
        if family not in self.families:
            raise ValueError(f"target {self.name!r} does not support {family} responses")
        if self.n_arms is not None and n_arms != self.n_arms:
            raise ValueError(f"target {self.name!r} needs {self.n_arms} arms, got {n_arms}")

    def jacobian(self, theta) -> np.ndarray:
        return numeric_jacobian(self.rho, theta)

    def __repr__(self):
        return f"{type(self).__name__}()"


def numeric_jacobian(fn, theta, h: float = 1e-6) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    K, d = theta.shape
    flat = theta.ravel()
    rows = []
    for j in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        rows.append((fn(up.reshape(K, d)) - fn(dn.reshape(K, d))) / (2 * h))
    return np.array(rows)


def _ratio_jacobian(a, b, da, db) -> np.ndarray:
    """Jacobian of (a/(a+b), b/(a+b)) given flat gradients of a and b."""
    col = (da * b - a * db) / (a + b) ** 2
    return np.column_stack([col, -col])


class UrnTarget(Target):
    """rho_k proportional to 1/q_k, the limit of RPW, Wei's urn and drop-the-loser."""

    name = "urn"
    families = (BERNOULLI,)

    def rho(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = 1.0 / (1.0 - theta[..., 0])
        return s / s.sum(axis=-1, keepdims=True)

    def jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = 1.0 / (1.0 - theta[:, 0])
        tot = s.sum()
        rho = s / tot
        K = len(s)
        return (s**2)[:, None] * (np.eye(K) - rho[None, :]) / tot


class NeymanTarget(Target):
    name = "neyman"
    n_arms = 2

    def __init__(self, family: str = BERNOULLI):
        self.family = family

    def rho(self, theta):
        sd = _sd(self.family, np.asarray(theta, dtype=float))
        r1 = sd[..., 0] / (sd[..., 0] + sd[..., 1])
        return np.stack([r1, 1 - r1], axis=-1)

    def check(self, family, n_arms):
        super().check(family, n_arms)
        if family != self.family:
            raise ValueError(f"Neyman target built for {self.family}, model is {family}")

    def jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.family == BERNOULLI:
            p = theta[:, 0]
            a = np.sqrt(p * (1 - p))
            da = np.array([(1 - 2 * p[0]) / (2 * a[0]), 0.0])
            db = np.array([0.0, (1 - 2 * p[1]) / (2 * a[1])])
        elif self.family == NORMAL:
            a = np.sqrt(theta[:, 1])
            da = np.array([0.0, 1 / (2 * a[0]), 0.0, 0.0])
            db = np.array([0.0, 0.0, 0.0, 1 / (2 * a[1])])
        else:
            lam = theta[:, 0]
            a = 1 / lam
            da = np.array([-1 / lam[0] ** 2, 0.0])
            db = np.array([0.0, -1 / lam[1] ** 2])
        return _ratio_jacobian(a[0], a[1], da, db)

    def __repr__(self):
        return f"NeymanTarget({self.family!r})"


class RSIHRTarget(Target):
    """sqrt(p1)/(sqrt(p1)+sqrt(p2)): fewest expected failures at fixed power."""

    name = "rsihr"
    families = (BERNOULLI,)
    n_arms = 2

    def rho(self, theta):
        r = np.sqrt(np.asarray(theta, dtype=float)[..., 0])
        r1 = r[..., 0] / (r[..., 0] + r[..., 1])
        return np.stack([r1, 1 - r1], axis=-1)

    def jacobian(self, theta):
        p = np.asarray(theta, dtype=float)[:, 0]
        a, b = np.sqrt(p)
        return _ratio_jacobian(a, b, np.array([0.5 / a, 0.0]), np.array([0.0, 0.5 / b]))


class ZRNormalTarget(Target):
    name = "zr"
    families = (NORMAL,)
    n_arms = 2

    def rho(self, theta):
        theta = np.asarray(theta, dtype=float)
        mu, sd = theta[..., 0], np.sqrt(theta[..., 1])
        a = np.sqrt(mu[..., 1]) * sd[..., 0]
        b = np.sqrt(mu[..., 0]) * sd[..., 1]
        r1 = a / (a + b)
        return np.stack([r1, 1 - r1], axis=-1)

    def jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        (m1, v1), (m2, v2) = theta
        s1, s2 = math.sqrt(v1), math.sqrt(v2)
        a, b = math.sqrt(m2) * s1, math.sqrt(m1) * s2
        da = np.array([0.0, math.sqrt(m2) / (2 * s1), s1 / (2 * math.sqrt(m2)), 0.0])
        db = np.array([s2 / (2 * math.sqrt(m1)), 0.0, 0.0, math.sqrt(m1) / (2 * s2)])
        return _ratio_jacobian(a, b, da, db)


class BMTarget(Target):
    name = "bm"
    families = (NORMAL,)
    n_arms = 2

    def __init__(self, c: float = 0.0, form: str = "symmetric"):
        if form not in ("symmetric", "printed"):
            raise ValueError("form must be 'symmetric' or 'printed'")
        self.c = float(c)
        self.form = form

    def rho(self, theta):
        theta = np.asarray(theta, dtype=float)
        mu, sd = theta[..., 0], np.sqrt(theta[..., 1])
        f = np.sqrt(ndtr((mu - self.c) / sd))
        a = f[..., 1] * sd[..., 0]
        b = f[..., 0] * (sd[..., 1] if self.form == "symmetric" else sd[..., 0])
        r1 = a / (a + b)
        return np.stack([r1, 1 - r1], axis=-1)

    def jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        mu, v = theta[:, 0], theta[:, 1]
        s = np.sqrt(v)
        z = (mu - self.c) / s
        rf = np.sqrt(ndtr(z))
        # d sqrt(Phi(z_k)) / d(mu_k, v_k)
        dphi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) / (2 * rf)
        dmu, dv = dphi / s, dphi * (-z / (2 * v))
        a = rf[1] * s[0]
        da = np.array([0.0, rf[1] / (2 * s[0]), s[0] * dmu[1], s[0] * dv[1]])
        if self.form == "symmetric":
            b = rf[0] * s[1]
            db = np.array([s[1] * dmu[0], s[1] * dv[0], 0.0, rf[0] / (2 * s[1])])
        else:
            b = rf[0] * s[0]
            db = np.array([s[0] * dmu[0], s[0] * dv[0] + rf[0] / (2 * s[0]), 0.0, 0.0])
        return _ratio_jacobian(a, b, da, db)

    def __repr__(self):
        return f"BMTarget(c={self.c}, form={self.form!r})"


class FixedTarget(Target):
    """A constant allocation, independent of the parameters."""

    name = "fixed"

    def __init__(self, rho):
        r = np.asarray(rho, dtype=float)
        if r.ndim != 1 or np.any(r < 0) or abs(r.sum() - 1) > 1e-12:
            raise ValueError("fixed target must be a probability vector")
        self.values = r
        self.n_arms = len(r)

    def rho(self, theta):
        theta = np.asarray(theta)
        return np.broadcast_to(self.values, theta.shape[:-1]).copy()

    def jacobian(self, theta):
        theta = np.asarray(theta)
        return np.zeros((theta.size, self.n_arms))

    def __repr__(self):
        return f"FixedTarget({self.values.tolist()})"


TARGETS = {
    "urn": UrnTarget,
    "neyman": NeymanTarget,
    "rsihr": RSIHRTarget,
    "zr": ZRNormalTarget,
    "bm": BMTarget,
    "fixed": FixedTarget,
}


# --------------------------------------------------------------------------


def clamp(rho, eps: float = CLAMP_FLOOR) -> np.ndarray:
    """Raise every component to at least ``eps`` while keeping the vector on
    the simplex; components already above the floor shrink proportionally.

    Vectors that already satisfy the floor are returned unchanged.
    """
    rho = np.array(rho, dtype=float)
    K = rho.shape[-1]
    if eps * K > 1:
        raise ValueError("floor too large for the number of arms")
    low = rho < eps
    if not low.any():
        return rho
    for _ in range(K):
        n_low = low.sum(axis=-1, keepdims=True)
        free = np.where(low, 0.0, rho).sum(axis=-1, keepdims=True)
        scale = (1 - n_low * eps) / np.where(free > 0, free, 1.0)
        out = np.where(low, eps, rho * scale)
        new_low = low | (out < eps)
        if (new_low == low).all():
            return out
        low = new_low
    return out


def sigma_lb(target: Target, family: str, theta) -> np.ndarray:
    """Efficiency lower bound J' diag(I_k^{-1}/rho_k) J for the allocation
    proportions of any design converging to ``target``."""
    theta = models.as_theta(family, theta)
    K, d = theta.shape
    rho = np.asarray(target.rho(theta), dtype=float)
    if np.any(rho <= 0):
        raise ValueError("lower bound needs every target component positive")
    J = np.asarray(target.jacobian(theta), dtype=float)
    W = np.zeros((K * d, K * d))
    for k in range(K):
        info = models.fisher_information(family, theta[k])
        if abs(np.linalg.det(info)) < 1e-300:
            raise ValueError(f"singular Fisher information on arm {k}")
        W[k * d:(k + 1) * d, k * d:(k + 1) * d] = np.linalg.inv(info) / rho[k]
    S = J.T @ W @ J
    return 0.5 * (S + S.T)


def dl_covariance(p) -> np.ndarray:
    """Asymptotic covariance of drop-the-loser allocation proportions."""
    p = np.asarray(p, dtype=float)
    q = 1 - p
    v = urn_target(q)
    K = len(p)
    left = np.eye(K) - np.outer(v, np.ones(K))
    right = np.eye(K) - np.outer(np.ones(K), v)
    return left @ np.diag(v * p / q) @ right


# --------------------------------------------------------------------------
# constrained multi-arm allocation


class BinaryNoncentrality:
    """Noncentrality of the chi-square homogeneity test for K binomial arms,
    as a function of per-arm sample sizes. Concave with nonnegative gradient."""

    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)
        self.a = 1.0 / (self.p * (1 - self.p))

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        am = self.a * m
        pbar = (am * self.p).sum(axis=-1, keepdims=True) / am.sum(axis=-1, keepdims=True)
        return (am * (self.p - pbar) ** 2).sum(axis=-1)


class WaldNoncentrality:
    """-(sigma_1^2/m_1 + sigma_2^2/m_2): maximising it is minimising the Wald variance."""

    def __init__(self, sigma):
        self.var = np.asarray(sigma, dtype=float) ** 2

    def __call__(self, m):
        return -(self.var / np.asarray(m, dtype=float)).sum(axis=-1)


def optimal_allocation_multiarm(
    w,
    floor: float,
    phi: Callable,
    budget: float = 1.0,
    tol: float = 1e-12,
    max_iter: int = 1000,
) -> np.ndarray:
    """Maximise ``phi(m)`` subject to ``sum(w*m) <= budget`` and
    ``m_k / sum(m) >= floor``; returns the optimal proportions.

    ``phi`` must be concave with nonnegative gradient, so the budget binds and
    the search runs over proportions ``r`` on the floored simplex with
    ``m = budget * r / (w . r)``.
    """
    w = np.asarray(w, dtype=float)
    K = len(w)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if floor < 0 or K * floor > 1 + 1e-12:
        raise ValueError(f"infeasible proportion floor {floor} for {K} arms")
    if K * floor >= 1 - 1e-12:
        return np.full(K, 1.0 / K)

    def loss(r):
        with np.errstate(divide="ignore", invalid="ignore"):
            return -float(phi(budget * r / (w @ r)))

    # keep strictly inside so sample sizes never hit zero
    lo = max(floor, 1e-9)
    res = minimize(loss, np.full(K, 1.0 / K), method="SLSQP",
                   bounds=[(lo, 1.0)] * K,
                   constraints=[{"type": "eq", "fun": lambda r: r.sum() - 1.0}],
                   options={"ftol": tol, "maxiter": max_iter})
    if not res.success:
        raise ConvergenceError(f"allocation optimiser failed: {res.message}")
    r = np.clip(res.x, lo, None)
    return r / r.sum()
