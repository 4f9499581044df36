"""Event histories, model specification, and the intensity / compensator of a unit.

A unit observed on ``[0, tau]`` has intensity

    z * Y(s) * lambda0(E(s)) * rho(N(s-); alpha) * psi(X(s) beta)

where ``E`` is the effective age, ``N`` the event count, ``X`` a
piecewise-constant covariate path and ``z`` the unit's frailty.

Covariate paths are left-continuous: a change recorded at time ``c`` applies
on ``(c, inf)``, so the value used for an event at ``c`` is the one in force
just before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .hazard import HazardRate, StepFunction, WeibullBaseline, adaptive_simpson

__all__ = [
    "BASELINES",
    "RHO_FAMILIES",
    "LINKS",
    "FRAILTIES",
    "AGE_POLICIES",
    "EventHistory",
    "ModelSpec",
    "Parameters",
    "PanelDesign",
    "n_dagger",
    "y_dagger",
    "rho_eval",
    "psi_eval",
    "covariate_at",
    "baseline_for",
    "intensity",
    "compensator",
    "martingale_residual",
    "build_design",
    "truncate",
]

BASELINES = ("weibull", "nonparametric")
RHO_FAMILIES = ("constant", "geometric", "jelinski_moranda", "loadshare")
LINKS = ("unit", "exponential")
FRAILTIES = ("none", "gamma")
AGE_POLICIES = ("minimal", "perfect", "bbs", "annotated")


def _normalize_covariates(covariates):
    if covariates is None:
        return np.zeros(1), np.zeros((1, 0))
    if isinstance(covariates, np.ndarray) and covariates.ndim == 1:
        covariates = covariates.tolist()
    covariates = list(covariates)
    if not covariates:
        return np.zeros(1), np.zeros((1, 0))
    first = covariates[0]
    if np.isscalar(first):
        # a constant covariate vector
        return np.zeros(1), np.asarray([covariates], dtype=float)
    times = np.array([float(c[0]) for c in covariates])
    try:
        values = np.array([np.asarray(c[1], dtype=float) for c in covariates], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"covariate vectors must be numeric and of equal length: {exc}") from None
    if values.ndim == 1:
        values = values.reshape(len(times), -1) if values.size else np.zeros((len(times), 0))
    return times, values


@dataclass(frozen=True, eq=False)
class EventHistory:
    """One unit's calendar event times on ``(0, tau]`` plus covariates and intervention marks.

    ``covariates`` is either a constant vector or a list of
    ``(change_time, vector)`` pairs whose first change time is 0.
    ``interventions``, when given, has one entry per event: ``"M"``
    (minimal), ``"P"`` (perfect), a restart age ``>= 0``, or ``None``.
    """

    unit_id: str
    tau: float
    event_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    covariates: Optional[Sequence] = None
    interventions: Optional[tuple] = None

    def __post_init__(self):
        tau = float(self.tau)
        if not (np.isfinite(tau) and tau > 0):
            raise ValidationError(f"unit {self.unit_id}: tau must be finite and > 0, got {self.tau}")
        ev = np.array(self.event_times, dtype=float).reshape(-1)
        if ev.size:
            if not np.all(np.isfinite(ev)):
                raise ValidationError(f"unit {self.unit_id}: non-finite event time")
            if ev[0] <= 0:
                raise ValidationError(f"unit {self.unit_id}: event times must be > 0")
            if np.any(np.diff(ev) <= 0):
                raise ValidationError(f"unit {self.unit_id}: event times must be strictly increasing")
            if ev[-1] > tau:
                raise ValidationError(f"unit {self.unit_id}: event at {ev[-1]} after tau={tau}")
        ev.setflags(write=False)
        times, values = _normalize_covariates(self.covariates)
        if times[0] != 0.0:
            raise ValidationError(f"unit {self.unit_id}: first covariate change time must be 0")
        if np.any(np.diff(times) <= 0):
            raise ValidationError(f"unit {self.unit_id}: covariate change times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"unit {self.unit_id}: non-finite covariate value")
        times.setflags(write=False)
        values.setflags(write=False)
        iv = self.interventions
        if iv is not None:
            iv = tuple(iv)
            if len(iv) != ev.size:
                raise ValidationError(f"unit {self.unit_id}: need one intervention mark per event")
            for mark in iv:
                if mark is None or mark in ("M", "P"):
                    continue
                if not isinstance(mark, (int, float, np.floating, np.integer)) or not np.isfinite(mark) or mark < 0:
                    raise ValidationError(f"unit {self.unit_id}: invalid intervention mark {mark!r}")
            iv = tuple(m if m is None or isinstance(m, str) else float(m) for m in iv)
            if all(m is None for m in iv):
                iv = None
        object.__setattr__(self, "unit_id", str(self.unit_id))
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "event_times", ev)
        object.__setattr__(self, "interventions", iv)
        object.__setattr__(self, "cov_times", times)
        object.__setattr__(self, "cov_values", values)
        object.__setattr__(
            self, "covariates", tuple((float(t), tuple(float(x) for x in v)) for t, v in zip(times, values))
        )

    @property
    def n_events(self) -> int:
        return int(self.event_times.size)

    @property
    def q(self) -> int:
        return int(self.cov_values.shape[1])

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.event_times]))

    def __eq__(self, other):
        if not isinstance(other, EventHistory):
            return NotImplemented
        return (
            self.unit_id == other.unit_id
            and self.tau == other.tau
            and np.array_equal(self.event_times, other.event_times)
            and self.covariates == other.covariates
            and self.interventions == other.interventions
        )

    def __hash__(self):
        return hash((self.unit_id, self.tau, self.event_times.tobytes()))


@dataclass(frozen=True)
class ModelSpec:
    baseline: str = "weibull"
    rho_family: str = "constant"
    link: str = "exponential"
    frailty: str = "none"
    age_policy: str = "minimal"
    loadshare_k: Optional[int] = None
    bbs_p: object = None

    def __post_init__(self):
        for name, value, allowed in (
            ("baseline", self.baseline, BASELINES),
            ("rho_family", self.rho_family, RHO_FAMILIES),
            ("link", self.link, LINKS),
            ("frailty", self.frailty, FRAILTIES),
            ("age_policy", self.age_policy, AGE_POLICIES),
        ):
            if value not in allowed:
                raise ValidationError(f"unknown {name} {value!r}; expected one of {allowed}")
        if self.rho_family == "loadshare":
            if self.loadshare_k is None or int(self.loadshare_k) < 1:
                raise ValidationError("loadshare requires an integer K >= 1")
        if self.bbs_p is not None and not callable(self.bbs_p):
            p = float(self.bbs_p)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"bbs probability must lie in [0, 1], got {p}")

    def n_alpha(self) -> int:
        if self.rho_family == "constant":
            return 0
        if self.rho_family == "loadshare":
            return int(self.loadshare_k) - 1
        return 1


@dataclass(frozen=True)
class Parameters:
    """``theta`` (Weibull shape, scale), ``alpha``, ``beta`` and frailty precision ``xi``.

    ``xi = inf`` means no frailty. ``alpha`` is a float, or a tuple
    ``(alpha_1, ..., alpha_{K-1})`` for the load-share family.
    """

    theta: tuple = (1.0, 1.0)
    alpha: object = 1.0
    beta: tuple = ()
    xi: float = float("inf")

    def __post_init__(self):
        theta = tuple(float(x) for x in self.theta)
        beta = tuple(float(x) for x in np.atleast_1d(self.beta)) if np.size(self.beta) else ()
        alpha = self.alpha
        if isinstance(alpha, (list, tuple, np.ndarray)):
            alpha = tuple(float(a) for a in alpha)
            if any(not a > 0 for a in alpha):
                raise ValidationError("load-share alphas must be > 0")
        else:
            alpha = float(alpha)
        if theta and any(not (t > 0) for t in theta):
            raise ValidationError(f"theta entries must be > 0, got {theta}")
        xi = float(self.xi)
        if not xi > 0:
            raise ValidationError(f"xi must be > 0, got {xi}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "xi", xi)


def n_dagger(h: EventHistory, s: float) -> int:
    return int(np.searchsorted(h.event_times, min(s, h.tau), side="right"))


def y_dagger(h: EventHistory, s: float) -> int:
    return int(s <= h.tau)


def rho_eval(family: str, k, alpha, loadshare_k: Optional[int] = None):
    """Event-count modulation ``rho(k; alpha)``.

    ``constant`` and ``geometric`` satisfy ``rho(0) = 1``. The
    Jelinski-Moranda and load-share families keep their natural scale
    (``rho(0) = alpha`` and ``K`` respectively).
    """
    k = np.asarray(k)
    if family == "constant":
        out = np.ones(k.shape)
    elif family == "geometric":
        out = np.power(float(alpha), k.astype(float))
    elif family == "jelinski_moranda":
        out = np.maximum(0.0, float(alpha) - k)
    elif family == "loadshare":
        K = int(loadshare_k)
        a = np.concatenate([[1.0], np.asarray(alpha, dtype=float).reshape(-1)])
        if a.size != K:
            raise ValidationError(f"loadshare K={K} needs {K - 1} alphas, got {a.size - 1}")
        kk = np.clip(k, 0, K - 1).astype(int)
        out = np.where(k < K, (K - k) * a[kk], 0.0)
    else:
        raise ValidationError(f"unknown rho family {family!r}")
    return float(out) if out.ndim == 0 else out


def psi_eval(link: str, w):
    w = np.asarray(w, dtype=float)
    if link == "unit":
        out = np.ones(w.shape)
    elif link == "exponential":
        out = np.exp(w)
    else:
        raise ValidationError(f"unknown link {link!r}")
    return float(out) if out.ndim == 0 else out


def covariate_at(h: EventHistory, s: float) -> np.ndarray:
    """Covariate vector in force at ``s`` (left-continuous path)."""
    idx = max(int(np.searchsorted(h.cov_times, s, side="left")) - 1, 0)
    return h.cov_values[idx]


def baseline_for(spec: ModelSpec, params: Parameters):
    if spec.baseline == "weibull":
        return WeibullBaseline(*params.theta)
    raise ValidationError("a nonparametric baseline has no pointwise hazard rate")


def truncate(h: EventHistory, s_star: float) -> EventHistory:
    """The part of a history observable over ``[0, s_star]``."""
    if s_star >= h.tau:
        return h
    keep = h.event_times <= s_star
    iv = None if h.interventions is None else tuple(m for m, k in zip(h.interventions, keep) if k)
    cov = [(t, v) for t, v in h.covariates if t < s_star] or [h.covariates[0]]
    return EventHistory(h.unit_id, s_star, h.event_times[keep], cov, iv)


@dataclass(frozen=True, eq=False)
class PanelDesign:
    """Panel flattened into calendar pieces ``(a, b]`` on which everything is smooth.

    A piece lies inside one inter-event interval and one covariate
    interval. ``k`` is the number of prior events, ``e_a``/``e_b`` the
    effective ages at the piece ends, ``event`` marks pieces ending in an
    event.
    """

    unit: np.ndarray
    a: np.ndarray
    b: np.ndarray
    k: np.ndarray
    slope: np.ndarray
    e_a: np.ndarray
    e_b: np.ndarray
    X: np.ndarray
    event: np.ndarray
    n_units: int
    n_events: np.ndarray

    @property
    def q(self) -> int:
        return int(self.X.shape[1])

    @property
    def total_events(self) -> int:
        return int(self.n_events.sum())

    def subset(self, units) -> "PanelDesign":
        """Design restricted to the given unit indices, renumbered in order."""
        units = np.asarray(units, dtype=int)
        remap = -np.ones(self.n_units, dtype=int)
        remap[units] = np.arange(units.size)
        m = remap[self.unit] >= 0
        return PanelDesign(
            remap[self.unit[m]], self.a[m], self.b[m], self.k[m], self.slope[m],
            self.e_a[m], self.e_b[m], self.X[m], self.event[m], int(units.size), self.n_events[units],
        )


def _unit_pieces(h: EventHistory, traj, upto: float):
    ev = h.event_times[h.event_times <= upto]
    changes = h.cov_times[(h.cov_times > 0) & (h.cov_times < upto)]
    pts = np.unique(np.concatenate([[0.0], ev, changes, [upto]]))
    a, b = pts[:-1], pts[1:]
    keep = b > a
    a, b = a[keep], b[keep]
    k = np.searchsorted(ev, a, side="right")
    event = np.zeros(a.size, dtype=bool)
    if ev.size:
        nxt = ev[np.minimum(k, ev.size - 1)]
        event = (k < ev.size) & (b == nxt)
    xi = np.maximum(np.searchsorted(h.cov_times, b, side="left") - 1, 0)
    seg = np.minimum(k, traj.n_segments - 1)
    slope = traj.slopes[seg]
    icpt = traj.intercepts[seg]
    e_a = slope * a + icpt
    e_b = slope * b + icpt
    return a, b, k, slope, e_a, e_b, h.cov_values[xi], event, int(ev.size)


def build_design(panel: Sequence[EventHistory], trajectories, s_star: float = np.inf) -> PanelDesign:
    """Flatten a panel and its effective-age trajectories into a :class:`PanelDesign`."""
    if len(panel) != len(trajectories):
        raise ValidationError("one trajectory per unit is required")
    q = {h.q for h in panel}
    if len(q) > 1:
        raise ValidationError(f"units disagree on covariate dimension: {sorted(q)}")
    q = q.pop() if q else 0
    cols = [[] for _ in range(8)]
    unit, n_events = [], []
    for i, (h, traj) in enumerate(zip(panel, trajectories)):
        parts = _unit_pieces(h, traj, min(h.tau, s_star))
        for c, p in zip(cols, parts[:8]):
            c.append(p)
        unit.append(np.full(parts[0].size, i))
        n_events.append(parts[8])
    if not panel:
        empty = np.empty(0)
        return PanelDesign(
            np.empty(0, dtype=int), empty, empty, np.empty(0, dtype=int), empty, empty, empty,
            np.zeros((0, q)), np.empty(0, dtype=bool), 0, np.empty(0, dtype=int),
        )
    a, b, k, slope, e_a, e_b, X, event = (np.concatenate(c) for c in cols)
    return PanelDesign(
        np.concatenate(unit), a, b, k.astype(int), slope, e_a, e_b, X.reshape(a.size, q), event,
        len(panel), np.asarray(n_events, dtype=int),
    )


def piece_multiplier(design: PanelDesign, spec: ModelSpec, alpha, beta) -> np.ndarray:
    """``rho(k; alpha) * psi(X beta)`` on every piece."""
    rho = rho_eval(spec.rho_family, design.k, alpha, spec.loadshare_k)
    if design.q:
        eta = design.X @ np.asarray(beta, dtype=float)
    else:
        eta = np.zeros(design.k.size)
    return np.asarray(rho, dtype=float) * np.asarray(psi_eval(spec.link, eta), dtype=float)


def piece_baseline_integral(design: PanelDesign, baseline) -> np.ndarray:
    """``int_a^b lambda0(E(w)) dw`` on every piece."""
    if hasattr(baseline, "cumhaz"):
        return (baseline.cumhaz(design.e_b) - baseline.cumhaz(design.e_a)) / design.slope
    out = np.empty(design.a.size)
    for j in range(out.size):
        ea, s = design.e_a[j], design.slope[j]
        out[j] = adaptive_simpson(
            lambda w: baseline.hazard(ea + s * (w - design.a[j])), design.a[j], design.b[j]
        )
    return out


def piece_step_integral(design: PanelDesign, cumhaz: StepFunction) -> np.ndarray:
    """``int Y dLambda0`` on every piece for a pure-jump baseline (image ``(e_a, e_b]``)."""
    mass = cumhaz(design.e_b) - cumhaz(design.e_a)
    return mass / design.slope


def _single_design(h, age, s):
    return build_design([h], [age], s_star=s)


def intensity(h: EventHistory, spec: ModelSpec, params: Parameters, age, s: float, z: float = 1.0) -> float:
    if spec.baseline == "nonparametric":
        raise ValidationError("intensity is undefined for a nonparametric baseline")
    if s > h.tau or z == 0:
        return 0.0
    k = int(np.searchsorted(h.event_times, s, side="left"))
    lam = float(baseline_for(spec, params).hazard(age.eval(s)))
    rho = rho_eval(spec.rho_family, k, params.alpha, spec.loadshare_k)
    x = covariate_at(h, s)
    psi = psi_eval(spec.link, float(x @ np.asarray(params.beta)) if x.size else 0.0)
    return float(z * lam * rho * psi)


def compensator(
    h: EventHistory, spec: ModelSpec, params: Parameters, age, s: float, z: float = 1.0, baseline=None
) -> float:
    """Cumulative intensity ``z * int_0^s Y rho psi lambda0(E(w)) dw``.

    ``baseline`` overrides the Weibull baseline implied by ``params``: a
    :class:`StepFunction` cumulative hazard, a :class:`HazardRate`, or any
    object with ``cumhaz``.
    """
    if s <= 0 or z == 0:
        return 0.0
    design = _single_design(h, age, s)
    mult = piece_multiplier(design, spec, params.alpha, params.beta)
    if baseline is None:
        baseline = baseline_for(spec, params)
    if isinstance(baseline, StepFunction):
        base = piece_step_integral(design, baseline)
    else:
        base = piece_baseline_integral(design, baseline)
    return float(z * np.sum(mult * base))


def martingale_residual(
    h: EventHistory, spec: ModelSpec, params: Parameters, age, s: float, z: float = 1.0, baseline=None
) -> float:
    return n_dagger(h, s) - compensator(h, spec, params, age, s, z, baseline)

