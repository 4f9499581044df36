"""Exact simulation of recurrent-event panels by inversion of the cumulative intensity.

Between events the cumulative intensity on a sub-interval with start age
``e0``, age slope ``a`` and constant multiplier ``c`` is
``c * [Lambda0(e0 + a*u) - Lambda0(e0)] / a``. Setting it equal to an
``Exp(1)`` draw and solving for ``u`` gives the next gap exactly.

Every unit draws from its own substream derived from ``(seed, unit index)``,
so panels do not depend on how units are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .age import EffectiveAgeTrajectory, trajectories_for, trajectory_from_marks
from .errors import ValidationError
from .hazard import WeibullBaseline
from .model import EventHistory, ModelSpec, Parameters, compensator, psi_eval, rho_eval

__all__ = [
    "CensoringSpec",
    "CovariateGenerator",
    "SimConfig",
    "SimulatedHistory",
    "PredictionSummary",
    "unit_rng",
    "derive_seed",
    "draw_frailty",
    "simulate_unit",
    "simulate_panel",
    "predict_future",
]


def unit_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 substream for unit ``index`` of the panel seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def derive_seed(seed: int, index: int) -> int:
    """A 63-bit child seed, e.g. for the ``index``-th Monte Carlo replication."""
    state = np.random.SeedSequence(int(seed), spawn_key=(int(index),)).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


@dataclass(frozen=True)
class CensoringSpec:
    """Censoring time distribution, optionally also stopping at the ``stop_after``-th event.

    Stopping at an event count is a stopping time of the observed history,
    so the likelihood is unchanged; it keeps explosive intensities
    (e.g. geometric ``alpha > 1`` with a flat baseline) simulable.
    """

    kind: str = "fixed"
    tau: float = 1.0
    low: float = 0.0
    high: float = 1.0
    rate: float = 1.0
    stop_after: Optional[int] = None

    def __post_init__(self):
        if self.stop_after is not None and int(self.stop_after) < 1:
            raise ValidationError("stop_after must be >= 1")
        if self.kind == "fixed":
            ok = self.tau > 0 and np.isfinite(self.tau)
        elif self.kind == "uniform":
            ok = 0 <= self.low < self.high and np.isfinite(self.high)
        elif self.kind == "exponential":
            ok = self.rate > 0
        else:
            raise ValidationError(f"unknown censoring distribution {self.kind!r}")
        if not ok:
            raise ValidationError(f"invalid {self.kind} censoring parameters")

    def draw(self, rng) -> float:
        if self.kind == "fixed":
            return float(self.tau)
        while True:
            tau = rng.uniform(self.low, self.high) if self.kind == "uniform" else rng.exponential(1.0 / self.rate)
            if tau > 0:
                return float(tau)


_DISTS = {
    "normal": ("mean", "sd"),
    "bernoulli": ("p",),
    "uniform": ("low", "high"),
    "constant": ("value",),
}


@dataclass(frozen=True)
class CovariateGenerator:
    """Covariates: a fixed design cycled over units, i.i.d. draws, or a path sampler.

    ``dists`` is a tuple of ``(name, params)`` pairs, e.g.
    ``("normal", {"mean": 0, "sd": 1})``; such covariates stay fixed over
    time. ``kind="path"`` calls ``sampler(rng, index)``, which returns a list
    of ``(change_time, vector)`` pairs starting at time 0.
    """

    kind: str = "none"
    rows: tuple = ()
    dists: tuple = ()
    sampler: Optional[Callable] = None
    dim: int = 0

    def __post_init__(self):
        if self.kind == "path" and self.sampler is None:
            raise ValidationError("path covariates need a sampler")
        if self.kind not in ("none", "fixed", "iid", "path"):
            raise ValidationError(f"unknown covariate generator {self.kind!r}")
        if self.kind == "fixed":
            if not self.rows or len({len(r) for r in self.rows}) != 1:
                raise ValidationError("fixed covariate design needs equal-length rows")
        for name, params in self.dists:
            if name not in _DISTS:
                raise ValidationError(f"unknown covariate distribution {name!r}")
            missing = set(_DISTS[name]) - set(params)
            if missing:
                raise ValidationError(f"{name} covariate missing {sorted(missing)}")

    @property
    def q(self) -> int:
        if self.kind == "path":
            return int(self.dim)
        if self.kind == "fixed":
            return len(self.rows[0])
        return len(self.dists) if self.kind == "iid" else 0

    def draw(self, rng, index: int):
        if self.kind == "none":
            return ()
        if self.kind == "path":
            return [(float(t), tuple(float(x) for x in v)) for t, v in self.sampler(rng, index)]
        if self.kind == "fixed":
            return tuple(float(x) for x in self.rows[index % len(self.rows)])
        out = []
        for name, p in self.dists:
            if name == "normal":
                out.append(rng.normal(p["mean"], p["sd"]))
            elif name == "bernoulli":
                out.append(float(rng.random() < p["p"]))
            elif name == "uniform":
                out.append(rng.uniform(p["low"], p["high"]))
            else:
                out.append(float(p["value"]))
        return tuple(float(x) for x in out)


@dataclass(frozen=True)
class SimConfig:
    n: int
    spec: ModelSpec
    params: Parameters
    censoring: CensoringSpec = CensoringSpec()
    covariates: CovariateGenerator = CovariateGenerator()
    seed: int = 0
    max_events: int = 100000

    def __post_init__(self):
        if self.max_events < 1:
            raise ValidationError("max_events must be >= 1")
        if self.n < 0:
            raise ValidationError("n must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be a nonnegative integer")
        if self.covariates.q != len(self.params.beta):
            raise ValidationError(
                f"covariate dimension {self.covariates.q} does not match beta of length {len(self.params.beta)}"
            )


@dataclass(frozen=True, eq=False)
class SimulatedHistory(EventHistory):
    """Simulated unit with its effective-age trajectory and frailty draw attached."""

    trajectory: Optional[EffectiveAgeTrajectory] = None
    frailty: float = 1.0


def draw_frailty(xi: float, rng) -> float:
    """Gamma frailty with mean 1 and variance ``1/xi``; exactly 1 when ``xi`` is infinite."""
    if np.isinf(xi):
        return 1.0
    return float(rng.gamma(shape=xi, scale=1.0 / xi))


def _baseline(spec: ModelSpec, params: Parameters, baseline):
    if baseline is not None:
        return baseline
    if spec.baseline != "weibull":
        raise ValidationError("simulation needs a parametric baseline")
    return WeibullBaseline(*params.theta)


def _next_event(base, start: float, end: float, slope: float, icpt: float, mult: float, target: float):
    """Calendar time where the cumulative intensity from ``start`` reaches ``target``, or None."""
    if mult <= 0:
        return None, target
    e0 = slope * start + icpt
    e1 = slope * end + icpt
    h0 = float(base.cumhaz(e0))
    mass = mult * (float(base.cumhaz(e1)) - h0) / slope
    if target > mass:
        return None, target - mass
    e_new = float(base.inv_cumhaz(h0 + slope * target / mult))
    t = (e_new - icpt) / slope
    return min(max(t, start), end), 0.0


def _bbs_prob(spec: ModelSpec, s: float) -> float:
    if spec.bbs_p is None:
        raise ValidationError("bbs simulation needs p(s)")
    p = spec.bbs_p(s) if callable(spec.bbs_p) else float(spec.bbs_p)
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"bbs probability p({s}) = {p} outside [0, 1]")
    return p


def simulate_unit(config: SimConfig, rng, index: int = 0, baseline=None) -> SimulatedHistory:
    spec, params = config.spec, config.params
    if spec.age_policy == "annotated":
        raise ValidationError("annotated ages cannot be simulated; use bbs or a fixed policy")
    base = _baseline(spec, params, baseline)
    tau = config.censoring.draw(rng)
    x = config.covariates.draw(rng, index)
    z = draw_frailty(params.xi, rng)
    # piecewise-constant psi(X(s) beta), X left-continuous
    path = x if config.covariates.kind == "path" else [(0.0, x)]
    change = np.array([t for t, _ in path[1:]] + [np.inf])
    psi = np.array([psi_eval(spec.link, float(np.dot(v, params.beta))) if len(v) else 1.0 for _, v in path])

    events, marks, draws = [], [], []
    s, k, slope, icpt = 0.0, 0, 1.0, 0.0
    while True:
        with np.errstate(over="ignore"):
            rho = rho_eval(spec.rho_family, k, params.alpha, spec.loadshare_k)
        if not np.isfinite(rho):
            raise ValidationError(f"unit {index}: rho overflowed after {k} events; the intensity looks explosive")
        if z * rho <= 0:
            break
        target = rng.exponential()
        t, piece = None, int(np.searchsorted(change, s, side="right"))
        lo = s
        while lo < tau:
            hi = min(change[piece], tau)
            t, target = _next_event(base, lo, hi, slope, icpt, z * rho * psi[piece], target)
            if t is not None:
                break
            lo, piece = hi, piece + 1
        if t is None:
            break
        if t <= s:
            t = float(np.nextafter(s, np.inf))
            if t > tau:
                break
        events.append(t)
        k += 1
        if k > config.max_events:
            raise ValidationError(
                f"unit {index}: more than {config.max_events} events before tau; the intensity looks explosive"
            )
        if spec.age_policy == "minimal":
            mark = "M"
        elif spec.age_policy == "perfect":
            mark = "P"
        else:
            d = int(rng.random() < _bbs_prob(spec, t))
            draws.append(d)
            mark = "P" if d else "M"
        marks.append(mark)
        if mark == "P":
            icpt = -t
        s = t
        if config.censoring.stop_after is not None and k >= config.censoring.stop_after:
            tau = t
            break
    traj = trajectory_from_marks(events, tau, marks, tuple(draws) if spec.age_policy == "bbs" else None)
    iv = tuple(marks) if spec.age_policy == "bbs" else None
    cov = x if config.covariates.kind == "path" else (x if x else None)
    return SimulatedHistory(str(index), tau, np.asarray(events), cov, iv, trajectory=traj, frailty=z)


def simulate_panel(config: SimConfig, baseline=None) -> list:
    """``config.n`` independent units; unit ``i`` uses substream ``(config.seed, i)``."""
    return [simulate_unit(config, unit_rng(config.seed, i), i, baseline) for i in range(config.n)]


@dataclass(frozen=True)
class PredictionSummary:
    """Monte Carlo summary of the next event time after ``start``.

    ``prob_event`` is ``P(T <= start + horizon)``; ``quantiles`` are of the
    unconditional law of ``T`` and are ``inf`` when not reached within the
    horizon; ``mean`` is ``E[T | T <= start + horizon]``.
    """

    start: float
    horizon: float
    n_draws: int
    prob_event: float
    mean: float
    median: float
    quantiles: dict = field(default_factory=dict)


def predict_future(
    h: EventHistory,
    fitted: Parameters,
    spec: ModelSpec,
    horizon: float,
    n_draws: int = 10_000,
    seed: int = 0,
    probs: Sequence[float] = (0.05, 0.25, 0.5, 0.75, 0.95),
) -> PredictionSummary:
    """Forward simulation of the next event past the end ``tau`` of the unit's history.

    The frailty is integrated over its gamma posterior given the unit's
    history when ``fitted.xi`` is finite.
    """
    if spec.baseline != "weibull":
        raise ValidationError("prediction needs a parametric baseline")
    start = h.tau
    if horizon <= 0:
        return PredictionSummary(start, float(horizon), 0, 0.0, float("nan"), float("nan"), {})
    base = WeibullBaseline(*fitted.theta)
    traj = getattr(h, "trajectory", None) or trajectories_for([h], spec)[0]
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    k = h.n_events
    x = h.cov_values[-1]
    psi = psi_eval(spec.link, float(x @ np.asarray(fitted.beta))) if x.size else 1.0
    rho = rho_eval(spec.rho_family, k, fitted.alpha, spec.loadshare_k)
    if np.isinf(fitted.xi):
        z = np.ones(n_draws)
    else:
        A = compensator(h, spec, fitted, traj, h.tau, 1.0)
        z = rng.gamma(shape=k + fitted.xi, scale=1.0 / (fitted.xi + A), size=n_draws)
    slope, icpt = traj.slopes[-1], traj.intercepts[-1]
    e0 = slope * start + icpt
    mult = z * rho * psi
    E = rng.exponential(size=n_draws)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_new = base.inv_cumhaz(base.cumhaz(e0) + slope * E / mult)
        T = np.where(mult > 0, start + (e_new - e0) / slope, np.inf)
    end = start + horizon
    inside = T <= end
    qs = {float(p): float(np.quantile(T, p)) if np.mean(inside) >= p else float("inf") for p in probs}
    mean = float(T[inside].mean()) if inside.any() else float("nan")
    median = float(np.median(T)) if np.mean(inside) >= 0.5 else float("inf")
    return PredictionSummary(start, float(horizon), int(n_draws), float(inside.mean()), mean, median, qs)
