"""Cumulative hazards, survivor functions and product-integration.

Three representations of a cumulative hazard are understood throughout:

* a :class:`StepFunction` (purely discrete hazard),
* a callable ``t -> Lambda(t)`` (absolutely continuous hazard),
* a pair ``(callable, StepFunction)`` (mixed hazard).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import ValidationError

__all__ = [
    "StepFunction",
    "SurvivorCurve",
    "WeibullBaseline",
    "HazardRate",
    "weibull_cumhaz",
    "weibull_hazard",
    "weibull_density",
    "product_integral",
    "partition_product",
    "survivor_to_cumhaz",
    "adaptive_simpson",
]


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous nondecreasing pure-jump function starting at 0.

    ``value(t)`` is the sum of the increments whose jump time is ``<= t``.
    """

    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        t = _frozen(self.jump_times)
        d = _frozen(self.increments)
        if t.ndim != 1 or t.shape != d.shape:
            raise ValidationError("jump_times and increments must be 1-d arrays of equal length")
        if t.size:
            if not np.all(np.isfinite(t)) or t[0] < 0:
                raise ValidationError("jump times must be finite and nonnegative")
            if np.any(np.diff(t) <= 0):
                raise ValidationError("jump times must be strictly increasing")
            if not np.all(np.isfinite(d)) or np.any(d <= 0):
                raise ValidationError("increments must be positive and finite")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "increments", d)

    @classmethod
    def empty(cls) -> "StepFunction":
        return cls(np.empty(0), np.empty(0))

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def __len__(self):
        return self.jump_times.size

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        cum = np.concatenate([[0.0], self.cumulative])
        out = cum[idx]
        return float(out) if out.ndim == 0 else out

    def left_limit(self, t):
        """Value just before ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="left")
        cum = np.concatenate([[0.0], self.cumulative])
        out = cum[idx]
        return float(out) if out.ndim == 0 else out

    def __eq__(self, other):
        if not isinstance(other, StepFunction):
            return NotImplemented
        return np.array_equal(self.jump_times, other.jump_times) and np.array_equal(
            self.increments, other.increments
        )


@dataclass(frozen=True, eq=False)
class SurvivorCurve:
    """Right-continuous nonincreasing survivor function, equal to 1 before ``times[0]``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = _frozen(self.times)
        v = _frozen(self.values)
        if t.shape != v.shape or t.ndim != 1:
            raise ValidationError("times and values must be 1-d arrays of equal length")
        if t.size and np.any(np.diff(t) <= 0):
            raise ValidationError("survivor times must be strictly increasing")
        if np.any(v < 0) or np.any(v > 1) or np.any(np.diff(v) > 0):
            raise ValidationError("survivor values must be nonincreasing in [0, 1]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        out = np.concatenate([[1.0], self.values])[idx]
        return float(out) if out.ndim == 0 else out


def weibull_cumhaz(t, shape, scale):
    """Weibull cumulative hazard ``(t / scale) ** shape``."""
    t = np.asarray(t, dtype=float)
    return (t / scale) ** shape


def weibull_hazard(t, shape, scale):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return (shape / scale) * (t / scale) ** (shape - 1.0)


def weibull_density(t, shape, scale):
    return weibull_hazard(t, shape, scale) * np.exp(-weibull_cumhaz(t, shape, scale))


@dataclass(frozen=True)
class WeibullBaseline:
    """Two-parameter Weibull baseline hazard with ``Lambda0(t) = (t/scale)**shape``."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0 and np.isfinite(self.shape) and np.isfinite(self.scale)):
            raise ValidationError(f"Weibull parameters must be positive, got ({self.shape}, {self.scale})")

    def hazard(self, t):
        return weibull_hazard(t, self.shape, self.scale)

    def cumhaz(self, t):
        return weibull_cumhaz(t, self.shape, self.scale)

    def log_hazard(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return (
                np.log(self.shape / self.scale) + (self.shape - 1.0) * np.log(t / self.scale)
            )

    def inv_cumhaz(self, h):
        h = np.asarray(h, dtype=float)
        return self.scale * h ** (1.0 / self.shape)


@dataclass(frozen=True)
class HazardRate:
    """Baseline known only through its hazard rate; integrals use quadrature."""

    rate: Callable[[float], float]

    def hazard(self, t):
        return self.rate(t)


CumulativeHazard = Union[StepFunction, Callable, tuple]


def _split(cumhaz):
    if isinstance(cumhaz, StepFunction):
        return None, cumhaz
    if isinstance(cumhaz, tuple):
        cont, disc = cumhaz
        return cont, disc
    if callable(cumhaz):
        return cumhaz, None
    raise TypeError(f"unsupported cumulative hazard {cumhaz!r}")


def product_integral(cumhaz: CumulativeHazard, t):
    """Survivor value ``prod_{(0, t]} (1 - Lambda(dw))``.

    The continuous part contributes ``exp(-Lambda_c(t))``, the discrete part
    ``prod_{t_j <= t} (1 - lambda_j)``. Returns 1 for ``t < 0``.
    """
    cont, disc = _split(cumhaz)
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    pos = t >= 0
    if cont is not None:
        out = np.where(pos, np.exp(-np.asarray(cont(np.where(pos, t, 0.0)), dtype=float)), out)
    if disc is not None and len(disc):
        if np.any(disc.increments > 1.0):
            raise ValidationError("discrete hazard increment exceeds 1")
        factors = np.cumprod(np.concatenate([[1.0], 1.0 - disc.increments]))
        idx = np.searchsorted(disc.jump_times, t, side="right")
        out = out * np.where(pos, factors[idx], 1.0)
    return float(out) if out.ndim == 0 else out


def partition_product(cumhaz: Callable, t: float, m: int) -> float:
    """``prod (1 - [Lambda(t_i) - Lambda(t_{i-1})])`` over a uniform ``m``-cell grid of ``[0, t]``."""
    grid = np.linspace(0.0, t, m + 1)
    inc = np.diff(np.asarray(cumhaz(grid), dtype=float))
    return float(np.exp(np.sum(np.log1p(-inc))))


def survivor_to_cumhaz(times, survivor) -> StepFunction:
    """Discrete hazard increments ``lambda_j = 1 - S(t_j) / S(t_j-)`` of a step survivor.

    ``survivor[j]`` is the survivor value on ``[times[j], times[j+1])``; the
    value before ``times[0]`` is 1. Points where the survivor does not drop
    carry no jump.
    """
    times = np.asarray(times, dtype=float)
    s = np.asarray(survivor, dtype=float)
    if times.shape != s.shape:
        raise ValidationError("times and survivor must have equal length")
    prev = np.concatenate([[1.0], s[:-1]])
    if np.any(np.diff(np.concatenate([[1.0], s])) > 0) or np.any(s < 0):
        raise ValidationError("survivor must be nonincreasing and nonnegative")
    keep = s < prev
    if np.any(prev[keep] <= 0):
        raise ValidationError("survivor drops after reaching 0")
    lam = (prev[keep] - s[keep]) / prev[keep]
    return StepFunction(times[keep], lam)


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10, max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature of ``f`` on ``[a, b]`` to absolute tolerance ``tol``."""
    if b <= a:
        return 0.0

    def simpson(fa, fm, fb, lo, hi):
        return (hi - lo) * (fa + 4.0 * fm + fb) / 6.0

    def recurse(lo, hi, fa, fm, fb, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, lo, mid)
        right = simpson(fm, frm, fb, mid, hi)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * eps:
            return left + right + delta / 15.0
        return recurse(lo, mid, fa, flm, fm, left, eps / 2.0, depth - 1) + recurse(
            mid, hi, fm, frm, fb, right, eps / 2.0, depth - 1
        )

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)
