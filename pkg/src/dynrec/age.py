"""Effective-age trajectories for the supported intervention policies.

A trajectory has one affine segment per inter-event interval
``(S_{j-1}, S_j]`` plus the final interval ``(S_K, tau]``. Each segment is
stored as ``E(s) = slope * s + intercept`` so that continuing a segment
across an event (minimal repair) reuses the same map exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ValidationError
from .model import EventHistory, ModelSpec

__all__ = [
    "EffectiveAgeTrajectory",
    "BbsConfig",
    "build_trajectory",
    "trajectories_for",
    "eval_age",
    "age_derivative",
    "invert_segment",
]


@dataclass(frozen=True, eq=False)
class EffectiveAgeTrajectory:
    v_start: np.ndarray
    v_end: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    draws: Optional[tuple] = None

    def __post_init__(self):
        for name in ("v_start", "v_end", "slopes", "intercepts"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.slopes <= 0):
            raise ValidationError("effective-age slopes must be > 0")
        if np.any(self.age_at_start < -1e-12):
            raise ValidationError("effective age must be nonnegative")

    @property
    def n_segments(self) -> int:
        return int(self.slopes.size)

    @property
    def age_at_start(self) -> np.ndarray:
        """``E(v_start+)`` for every segment."""
        return self.slopes * self.v_start + self.intercepts

    @property
    def age_at_end(self) -> np.ndarray:
        return self.slopes * self.v_end + self.intercepts

    @property
    def segments(self):
        """``(v_start, age_at_start, slope)`` triples."""
        return list(zip(self.v_start.tolist(), self.age_at_start.tolist(), self.slopes.tolist()))

    def segment_index(self, s):
        s = np.asarray(s, dtype=float)
        return np.searchsorted(self.v_start[1:], s, side="left")

    def eval(self, s):
        j = self.segment_index(s)
        out = self.slopes[j] * np.asarray(s, dtype=float) + self.intercepts[j]
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, s):
        out = self.slopes[self.segment_index(s)]
        return float(out) if np.ndim(out) == 0 else out

    def invert(self, j: int, t: float) -> float:
        lo, hi = self.age_at_start[j], self.age_at_end[j]
        if not lo < t <= hi:
            raise ValidationError(f"effective age {t} outside segment {j} image ({lo}, {hi}]")
        return float((t - self.intercepts[j]) / self.slopes[j])


def eval_age(traj: EffectiveAgeTrajectory, s):
    return traj.eval(s)


def age_derivative(traj: EffectiveAgeTrajectory, s):
    return traj.derivative(s)


def invert_segment(traj: EffectiveAgeTrajectory, j: int, t: float) -> float:
    return traj.invert(j, t)


@dataclass(frozen=True)
class BbsConfig:
    """Perfect-repair probability ``p(s)`` and/or fixed Bernoulli draws ``I_1, I_2, ...``."""

    p: Union[Callable[[float], float], float, None] = None
    draws: Optional[Sequence[int]] = None

    def prob(self, s: float) -> float:
        p = self.p(s) if callable(self.p) else float(self.p)
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"bbs probability p({s}) = {p} outside [0, 1]")
        return p


def _restart_marks(h: EventHistory, policy: str, bbs: Optional[BbsConfig], rng):
    K = h.n_events
    if policy == "minimal":
        return ["M"] * K, None
    if policy == "perfect":
        return ["P"] * K, None
    if policy == "annotated":
        if K == 0:
            return [], None
        if h.interventions is None or any(m is None for m in h.interventions):
            raise ValidationError(f"unit {h.unit_id}: annotated policy needs a mark for every event")
        return list(h.interventions), None
    if policy == "bbs":
        if bbs is None or (bbs.p is None and bbs.draws is None):
            raise ValidationError("bbs policy needs p(s) or fixed draws")
        if bbs.draws is not None:
            draws = [int(d) for d in bbs.draws]
            if len(draws) < K:
                raise ValidationError(f"unit {h.unit_id}: {K} events but only {len(draws)} bbs draws")
            draws = draws[:K]
        else:
            if rng is None:
                raise ValidationError("bbs policy without fixed draws needs a random generator")
            draws = [int(rng.random() < bbs.prob(s)) for s in h.event_times]
        return ["P" if d else "M" for d in draws], tuple(draws)
    raise ValidationError(f"unknown age policy {policy!r}")


def trajectory_from_marks(event_times, tau: float, marks, draws=None) -> EffectiveAgeTrajectory:
    ev = np.asarray(event_times, dtype=float)
    starts = np.concatenate([[0.0], ev])
    ends = np.concatenate([ev, [tau]])
    slopes = np.ones(starts.size)
    icpt = np.zeros(starts.size)
    for j, mark in enumerate(marks, start=1):
        s = ev[j - 1]
        if mark == "M":
            slopes[j], icpt[j] = slopes[j - 1], icpt[j - 1]
        elif mark == "P":
            icpt[j] = -s
        else:
            icpt[j] = float(mark) - s
    return EffectiveAgeTrajectory(starts, ends, slopes, icpt, draws)


def build_trajectory(
    h: EventHistory, policy: str, bbs: Optional[BbsConfig] = None, rng=None
) -> EffectiveAgeTrajectory:
    """Effective-age trajectory of ``h`` under ``policy``.

    ``minimal`` keeps ``E(s) = s``; ``perfect`` restarts at 0 after each
    event; ``bbs`` restarts at 0 after event ``k`` iff ``I_k = 1``;
    ``annotated`` uses the history's own marks (``"M"``, ``"P"`` or a
    restart age, slope 1).
    """
    marks, draws = _restart_marks(h, policy, bbs, rng)
    return trajectory_from_marks(h.event_times, h.tau, marks, draws)


def trajectories_for(panel: Sequence[EventHistory], spec: ModelSpec) -> list:
    """Observed trajectories for fitting.

    Under ``bbs`` the Bernoulli draws must be observable: either recorded as
    ``"P"``/``"M"`` intervention marks or attached by the simulator.
    """
    out = []
    for h in panel:
        if spec.age_policy == "bbs":
            attached = getattr(h, "trajectory", None)
            if h.n_events == 0:
                out.append(build_trajectory(h, "minimal"))
            elif h.interventions is not None and all(m in ("M", "P") for m in h.interventions):
                out.append(build_trajectory(h, "annotated"))
            elif attached is not None:
                out.append(attached)
            else:
                raise ValidationError(f"unit {h.unit_id}: bbs draws are not observed")
        else:
            out.append(build_trajectory(h, spec.age_policy))
    return out
