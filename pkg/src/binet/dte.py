"""Distribution-sensitive two-stage gradient estimator.

The backward pass replaces d sign(x)/dx by the derivative of
``g(x) = k * tanh(t * x)``.  ``t`` grows geometrically from ``t_min`` to
``t_max`` over training and is clamped per layer by quantiles of the
current standardized weights; ``k = max(1/t, 1)`` keeps the peak
derivative ``k*t`` at one while ``t < 1`` and lets it grow afterwards.

Baseline estimators (identity STE, clip STE, and the unclamped
exponential schedule) are selectable through :class:`Estimator`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

CLAMP_MODES = ("literal", "active-region")
ESTIMATOR_MODES = ("dte", "ede", "clip", "identity")


@dataclass(frozen=True)
class EstimatorState:
    t: float
    k: float
    epoch_i: int
    total_N: int
    epsilon: float = 0.1
    t_min: float = 0.1
    t_max: float = 10.0

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"t must be positive, got {self.t}")
        if self.total_N <= 0:
            raise ValueError("total_N must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")

    @classmethod
    def from_t(cls, t: float, epoch_i: int = 0, total_N: int = 1, **kw) -> "EstimatorState":
        return cls(t=float(t), k=max(1.0 / t, 1.0), epoch_i=epoch_i, total_N=total_N, **kw)

    @property
    def peak(self) -> float:
        return self.k * self.t


@dataclass(frozen=True)
class ClampBounds:
    t_eps: float
    t_100: float
    mode: str = "literal"


def raw_schedule(i: int, N: int, t_min: float = 0.1, t_max: float = 10.0) -> float:
    """t_min * 10**((i/N) * log10(t_max/t_min))."""
    if N <= 0:
        raise ValueError("raw_schedule: total epochs N must be positive")
    if not 0 <= i <= N:
        raise ValueError(f"raw_schedule: epoch {i} outside [0, {N}]")
    return t_min * 10.0 ** ((i / N) * math.log10(t_max / t_min))


def quantile_abs(x, q: float) -> float:
    """Nearest-rank quantile of |x|: the ceil(q*n)-th smallest value (1-based)."""
    if not q > 0:
        raise ValueError(f"quantile_abs: q must be > 0, got {q}")
    a = np.abs(np.asarray(x, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("quantile_abs: empty tensor")
    rank = min(max(math.ceil(q * a.size), 1), a.size)
    return float(np.partition(a, rank - 1)[rank - 1])


def clamp_bounds(weights_std, epsilon: float, mode: str = "literal", t_min: float = 0.1) -> ClampBounds:
    """Per-layer clamps on t derived from the standardized weight distribution.

    ``literal``: t_eps is the epsilon-quantile of |w|, t_100 the maximum |w|.
    ``active-region``: no lower clamp beyond ``t_min``; t_100 = 1 / (epsilon-quantile
    of |w|), so at least a fraction epsilon of weights lies in |x| <= 1/t.
    """
    if mode not in CLAMP_MODES:
        raise ValueError(f"unknown clamp mode {mode!r}; expected one of {CLAMP_MODES}")
    # epsilon = 0 disables the lower limit on updatable weights
    q = quantile_abs(weights_std, epsilon) if epsilon > 0 else 0.0
    if mode == "literal":
        return ClampBounds(q, quantile_abs(weights_std, 1.0), mode)
    return ClampBounds(t_min, 1.0 / q if q > 0 else math.inf, mode)


def effective_t(t_raw: float, bounds: ClampBounds) -> tuple[float, float]:
    """Clamp the scheduled t into [t_eps, t_100]; return (t, k)."""
    t = min(bounds.t_100, max(t_raw, bounds.t_eps))
    if not t > 0:
        # all-zero weights give zero quantiles
        t = t_raw
    return t, max(1.0 / t, 1.0)


def sech2(u) -> np.ndarray:
    """1 - tanh(u)^2 without cancellation for large |u|."""
    e = np.exp(-2.0 * np.abs(u))
    return 4.0 * e / np.square(1.0 + e)


def dte_derivative(x, state: EstimatorState) -> np.ndarray:
    """k * t * (1 - tanh^2(t * x))."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return (state.k * state.t * sech2(state.t * x)).astype(dtype, copy=False)


def dte_forward(x, state: EstimatorState) -> np.ndarray:
    """k * tanh(t * x); a smooth stand-in for sign used for gradient checks."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return (state.k * np.tanh(state.t * x)).astype(dtype, copy=False)


def updatable_fraction(weights_std, state: EstimatorState, delta: float = 0.1) -> float:
    """Fraction of weights whose estimator derivative is at least delta * peak."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    x = np.asarray(weights_std, dtype=np.float64)
    return float(np.mean(sech2(state.t * x) >= delta))


class Estimator:
    """Per-layer backward rule and its epoch schedule.

    ``mode`` selects the derivative: ``dte`` (clamped schedule), ``ede``
    (same schedule without distribution clamps), ``clip`` (1 on |x| <= 1) or
    ``identity``.  Call :meth:`update` once per epoch before training on it.
    """

    def __init__(
        self,
        mode: str = "dte",
        clamp_mode: str = "literal",
        epsilon: float = 0.1,
        t_min: float = 0.1,
        t_max: float = 10.0,
        delta: float = 0.1,
    ):
        if mode not in ESTIMATOR_MODES:
            raise ValueError(f"unknown estimator {mode!r}; expected one of {ESTIMATOR_MODES}")
        if clamp_mode not in CLAMP_MODES:
            raise ValueError(f"unknown clamp mode {clamp_mode!r}; expected one of {CLAMP_MODES}")
        self.mode = mode
        self.clamp_mode = clamp_mode
        self.epsilon = epsilon
        self.t_min = t_min
        self.t_max = t_max
        self.delta = delta
        self.bounds: Optional[ClampBounds] = None
        self.state = EstimatorState.from_t(1.0, 0, 1, epsilon=epsilon, t_min=t_min, t_max=t_max)
        self.t_raw = 1.0

    def config(self) -> dict:
        return {
            "mode": self.mode,
            "clamp_mode": self.clamp_mode,
            "epsilon": self.epsilon,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "delta": self.delta,
        }

    def update(self, epoch: int, total: int, weights_std) -> EstimatorState:
        kw = dict(epsilon=self.epsilon, t_min=self.t_min, t_max=self.t_max)
        if self.mode in ("clip", "identity"):
            self.state = EstimatorState.from_t(1.0, epoch, total, **kw)
            self.bounds = None
            return self.state
        self.t_raw = raw_schedule(epoch, total, self.t_min, self.t_max)
        if self.mode == "ede":
            self.bounds = None
            t, k = self.t_raw, max(1.0 / self.t_raw, 1.0)
        else:
            self.bounds = clamp_bounds(weights_std, self.epsilon, self.clamp_mode, self.t_min)
            t, k = effective_t(self.t_raw, self.bounds)
        self.state = EstimatorState(t=t, k=k, epoch_i=epoch, total_N=total, **kw)
        return self.state

    def set_state(self, state: EstimatorState, bounds: Optional[ClampBounds] = None) -> None:
        self.state = state
        self.bounds = bounds

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x)
        if self.mode == "identity":
            return np.ones_like(x)
        if self.mode == "clip":
            return (np.abs(x) <= 1.0).astype(x.dtype)
        return dte_derivative(x, self.state)

    def surrogate(self, x) -> np.ndarray:
        """Differentiable forward whose true derivative is :meth:`derivative`."""
        x = np.asarray(x)
        if self.mode == "identity":
            return x.copy()
        if self.mode == "clip":
            return np.clip(x, -1.0, 1.0)
        return dte_forward(x, self.state)

    def updatable_fraction(self, weights_std) -> float:
        if self.mode == "identity":
            return 1.0
        if self.mode == "clip":
            return float(np.mean(np.abs(np.asarray(weights_std)) <= 1.0))
        return updatable_fraction(weights_std, self.state, self.delta)

    def describe(self) -> dict:
        b = self.bounds
        return {
            "t": self.state.t,
            "k": self.state.k,
            "t_raw": self.t_raw,
            "t_eps": b.t_eps if b else float("nan"),
            "t_100": b.t_100 if b else float("nan"),
        }
