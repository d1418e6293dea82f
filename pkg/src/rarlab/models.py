"""Response distributions, per-arm estimators and Fisher information.

Parameters are stored as arrays of shape ``(K, d)``: ``d = 1`` for Bernoulli
(success probability) and Exponential (rate), ``d = 2`` for Normal
(mean, variance). Everything here broadcasts over leading replication axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BERNOULLI = "bernoulli"
NORMAL = "normal"
EXPONENTIAL = "exponential"
FAMILIES = (BERNOULLI, NORMAL, EXPONENTIAL)

VARIANCE_FLOOR = 1e-8

_DIM = {BERNOULLI: 1, NORMAL: 2, EXPONENTIAL: 1}
_PRIOR_CENTER = {
    BERNOULLI: (0.5,),
    NORMAL: (0.0, 1.0),
    EXPONENTIAL: (1.0,),
}


def param_dim(family: str) -> int:
    try:
        return _DIM[family]
    except KeyError:
        raise ValueError(f"unknown response family {family!r}") from None


def as_theta(family: str, theta) -> np.ndarray:
    """Coerce per-arm parameters to a float array of shape (K, d)."""
    d = param_dim(family)
    arr = np.asarray(theta, dtype=float)
    if d == 1 and arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ValueError(f"{family} parameters must have shape (K, {d}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ResponseModel:
    """Outcome distribution family with the true parameter of every arm.

    Degenerate Bernoulli arms (p = 0 or 1) are accepted for simulation;
    :func:`fisher_information` rejects them.
    """

    family: str
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        theta = as_theta(self.family, self.theta)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if theta.shape[0] < 2:
            raise ValueError("a trial needs at least two arms")
        if self.family == BERNOULLI:
            if np.any((theta < 0) | (theta > 1)):
                raise ValueError("Bernoulli probabilities must lie in [0, 1]")
        elif self.family == NORMAL:
            if np.any(theta[:, 1] <= 0):
                raise ValueError("Normal variances must be positive")
        elif np.any(theta <= 0):
            raise ValueError("Exponential rates must be positive")

    @classmethod
    def bernoulli(cls, *p: float) -> "ResponseModel":
        return cls(BERNOULLI, np.asarray(p, dtype=float))

    @classmethod
    def normal(cls, means, variances) -> "ResponseModel":
        return cls(NORMAL, np.column_stack([means, variances]))

    @classmethod
    def exponential(cls, *rates: float) -> "ResponseModel":
        return cls(EXPONENTIAL, np.asarray(rates, dtype=float))

    @property
    def n_arms(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        """Draw one outcome per arm for each of ``size`` patients -> (size, K)."""
        return sample(self.family, self.theta, rng, size)

    def mean(self) -> np.ndarray:
        if self.family == EXPONENTIAL:
            return 1.0 / self.theta[:, 0]
        return self.theta[:, 0].copy()


def sample(family: str, theta, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    theta = as_theta(family, theta)
    K = theta.shape[0]
    if family == BERNOULLI:
        return (rng.random((size, K)) < theta[:, 0]).astype(float)
    if family == NORMAL:
        return theta[:, 0] + np.sqrt(theta[:, 1]) * rng.standard_normal((size, K))
    return rng.exponential(1.0 / theta[:, 0], size=(size, K))


@dataclass
class EstimatorState:
    """Per-arm sufficient statistics: count, sum and sum of squares.

    Arrays have shape ``(..., K)`` so one object can hold many replications.
    """

    N: np.ndarray
    S: np.ndarray
    Q: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "EstimatorState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_data(cls, arms, outcomes, n_arms: int) -> "EstimatorState":
        arms = np.asarray(arms, dtype=int)
        y = np.asarray(outcomes, dtype=float)
        N = np.bincount(arms, minlength=n_arms).astype(float)
        S = np.bincount(arms, weights=y, minlength=n_arms)
        Q = np.bincount(arms, weights=y * y, minlength=n_arms)
        return cls(N, S, Q)

    def add(self, rows, arms, y) -> None:
        """Record outcome ``y`` on arm ``arms`` for replication ``rows``."""
        np.add.at(self.N, (rows, arms), 1.0)
        np.add.at(self.S, (rows, arms), y)
        np.add.at(self.Q, (rows, arms), y * y)

    def copy(self) -> "EstimatorState":
        return EstimatorState(self.N.copy(), self.S.copy(), self.Q.copy())


def estimate(state: EstimatorState, family: str, guess=None, mle: bool = False) -> np.ndarray:
    """Point estimates of every arm's parameter, shape ``(..., K, d)``.

    Bernoulli uses the add-half rule (S + 0.5)/(N + 1) unless ``mle`` is set.
    Arms without observations get ``guess`` (per-arm ``(K, d)`` or a single
    ``(d,)`` value), defaulting to the prior centre of the family.
    """
    N, S, Q = state.N, state.S, state.Q
    d = param_dim(family)
    empty = N <= 0
    safe_n = np.where(empty, 1.0, N)
    if family == BERNOULLI:
        p = S / safe_n if mle else (S + 0.5) / (N + 1.0)
        est = p[..., None]
    elif family == NORMAL:
        mu = S / safe_n
        var = np.maximum(Q / safe_n - mu * mu, VARIANCE_FLOOR)
        est = np.stack([mu, var], axis=-1)
    else:
        est = (N / np.where(S > 0, S, np.inf))[..., None]
    if guess is None:
        if family == BERNOULLI and not mle:
            return est
        guess = _PRIOR_CENTER[family]
    # (d,) broadcasts to every arm, (K, d) is per arm
    g = np.broadcast_to(np.asarray(guess, dtype=float).reshape(-1, d), est.shape)
    return np.where(empty[..., None], g, est)


def fisher_information(family: str, theta_k) -> np.ndarray:
    """Fisher information matrix of one observation from a single arm."""
    t = np.atleast_1d(np.asarray(theta_k, dtype=float))
    if family == BERNOULLI:
        p = t[0]
        if not 0.0 < p < 1.0:
            raise ValueError(f"Bernoulli information undefined at p={p}")
        return np.array([[1.0 / (p * (1.0 - p))]])
    if family == NORMAL:
        v = t[1]
        if not v > 0.0:
            raise ValueError(f"Normal information undefined at variance={v}")
        return np.diag([1.0 / v, 1.0 / (2.0 * v * v)])
    if family == EXPONENTIAL:
        lam = t[0]
        if not lam > 0.0:
            raise ValueError(f"Exponential information undefined at rate={lam}")
        return np.array([[1.0 / lam**2]])
    raise ValueError(f"unknown response family {family!r}")


def expected_loglik(family: str, theta_true, theta) -> float:
    """E_{theta_true}[log f(X | theta)] in closed form (used by tests as an oracle)."""
    a = np.atleast_1d(np.asarray(theta_true, dtype=float))
    b = np.atleast_1d(np.asarray(theta, dtype=float))
    if family == BERNOULLI:
        return a[0] * np.log(b[0]) + (1 - a[0]) * np.log1p(-b[0])
    if family == NORMAL:
        return -0.5 * np.log(2 * np.pi * b[1]) - (a[1] + (a[0] - b[0]) ** 2) / (2 * b[1])
    return np.log(b[0]) - b[0] / a[0]
