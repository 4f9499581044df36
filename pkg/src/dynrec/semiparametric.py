"""Semiparametric estimation with a nonparametric baseline in the effective-age scale.

Each inter-event segment of unit ``i`` maps, through its effective-age
map, onto an image interval ``(E(S_{j-1}+), E(S_j)]`` carrying the weight
``rho(j-1; alpha) psi(X beta) / E'``. The generalized at-risk process is
the sum of these weighted indicators, and the baseline estimator jumps at
observed event ages by (events at that age) / (aggregated at-risk).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import ValidationError
from .hazard import StepFunction, SurvivorCurve
from .model import ModelSpec, PanelDesign, Parameters, build_design, piece_multiplier
from .parametric import (
    XI_INF_THRESHOLD,
    FitResult,
    ParamLayout,
    as_design,
    gamma_estep,
    update_xi,
)

__all__ = [
    "GapScaleSegments",
    "GapScalePanel",
    "SemiparametricFit",
    "build_segments",
    "at_risk_Y",
    "s0_aggregate",
    "breslow_lambda0",
    "product_limit_S0",
    "profile_loglik",
    "semiparam_marginal_loglik",
    "maximize_profile",
    "semiparam_em_fit",
    "semiparam_em_step",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GapScaleSegments:
    """One unit's image intervals ``(lo, hi]`` in the effective-age scale with their weights."""

    lo: np.ndarray
    hi: np.ndarray
    weight: np.ndarray

    def at_risk(self, t):
        t = np.asarray(t, dtype=float)
        inside = (self.lo[:, None] < t.reshape(1, -1)) & (t.reshape(1, -1) <= self.hi[:, None])
        out = (self.weight[:, None] * inside).sum(axis=0)
        return float(out[0]) if t.ndim == 0 else out


def build_segments(panel, spec: ModelSpec, alpha, beta, s_star: float = np.inf, trajectories=None) -> list:
    """Per-unit :class:`GapScaleSegments` (one entry per calendar piece, covariate changes split)."""
    if trajectories is None:
        design = as_design(panel, spec, s_star)
    else:
        design = build_design(list(panel), trajectories, s_star)
    if np.any(design.slope <= 0):
        raise ValidationError("effective-age slopes must be positive")
    w = piece_multiplier(design, spec, alpha, beta) / design.slope
    return [
        GapScaleSegments(design.e_a[m], design.e_b[m], w[m])
        for m in (design.unit == i for i in range(design.n_units))
    ]


def at_risk_Y(segments: GapScaleSegments, t):
    return segments.at_risk(t)


def s0_aggregate(segments_list: Sequence[GapScaleSegments], t, z=None):
    """``sum_i z_i Y_i(t)`` (``z = 1`` when omitted)."""
    z = np.ones(len(segments_list)) if z is None else np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    out = sum(zi * np.asarray(seg.at_risk(t)) for zi, seg in zip(z, segments_list))
    return float(out) if t.ndim == 0 else np.asarray(out)


class GapScalePanel:
    """Sorted-sweep evaluation of the aggregated at-risk process at event ages.

    Ages do not depend on ``(alpha, beta)``, so the sort orders are computed
    once and each parameter point only needs cumulative sums.
    """

    def __init__(self, design: PanelDesign, spec: ModelSpec):
        self.design = design
        self.spec = spec
        self.order_a = np.argsort(design.e_a, kind="stable")
        self.order_b = np.argsort(design.e_b, kind="stable")
        self.sorted_a = design.e_a[self.order_a]
        self.sorted_b = design.e_b[self.order_b]
        ev = design.event
        self.event_age = design.e_b[ev]
        self.event_unit = design.unit[ev]
        self.ages, self.event_slot, self.mult = np.unique(
            self.event_age, return_inverse=True, return_counts=True
        )
        self.cnt_a = np.searchsorted(self.sorted_a, self.ages, side="left")
        self.cnt_b = np.searchsorted(self.sorted_b, self.ages, side="left")

    def piece_weights(self, alpha, beta, z=None):
        d = self.design
        w = piece_multiplier(d, self.spec, alpha, beta) / d.slope
        if z is not None:
            w = w * np.asarray(z, dtype=float)[d.unit]
        return w

    def s0(self, w):
        """Aggregated at-risk at every distinct event age for piece weights ``w``."""
        ca = np.concatenate([[0.0], np.cumsum(w[self.order_a])])
        cb = np.concatenate([[0.0], np.cumsum(w[self.order_b])])
        s0 = ca[self.cnt_a] - cb[self.cnt_b]
        scale = max(float(np.sum(np.abs(w))), 1.0)
        return np.where(s0 > 1e-12 * scale, s0, 0.0)

    def lambda0(self, w) -> StepFunction:
        s0 = self.s0(w)
        ok = s0 > 0
        return StepFunction(self.ages[ok], self.mult[ok] / s0[ok])

    def profile(self, alpha, beta, z=None) -> float:
        d = self.design
        mult = piece_multiplier(d, self.spec, alpha, beta)
        w = mult / d.slope
        if z is not None:
            w = w * np.asarray(z, dtype=float)[d.unit]
        s0 = self.s0(w)[self.event_slot]
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log(mult[d.event])) - np.sum(np.log(s0)))

    def unit_cumhaz(self, alpha, beta, lam: StepFunction) -> np.ndarray:
        """``A_i = int Y_i(w) dLambda0(w)`` for every unit."""
        d = self.design
        w = piece_multiplier(d, self.spec, alpha, beta) / d.slope
        mass = lam(d.e_b) - lam(d.e_a)
        return np.bincount(d.unit, weights=w * mass, minlength=d.n_units)

    def marginal(self, alpha, beta, xi, lam: StepFunction) -> float:
        """Gamma-frailty marginal log-likelihood with a pure-jump baseline ``lam``."""
        d = self.design
        mult = piece_multiplier(d, self.spec, alpha, beta)
        A = self.unit_cumhaz(alpha, beta, lam)
        jump = lam(self.event_age) - lam.left_limit(self.event_age)
        with np.errstate(divide="ignore"):
            logb = np.log(mult[d.event]) + np.log(jump)
        if np.isinf(xi):
            return float(np.sum(logb) - np.sum(A))
        k = d.k[d.event]
        head = -xi * np.log1p(A / xi)
        return float(np.sum(head) + np.sum(np.log1p(k / xi) + logb - np.log1p(A[self.event_unit] / xi)))


def _engine(panel, spec, s_star):
    if isinstance(panel, GapScalePanel):
        return panel
    return GapScalePanel(as_design(panel, spec, s_star), spec)


def breslow_lambda0(panel, spec: ModelSpec, alpha, beta, s_star: float = np.inf, z=None) -> StepFunction:
    """Generalized Aalen-Breslow-Nelson estimator at fixed ``(alpha, beta)``.

    Jumps at the distinct observed event ages by ``d(t) / S0(t)``; ages with
    ``S0 = 0`` are skipped.
    """
    eng = _engine(panel, spec, s_star)
    if eng.ages.size == 0:
        return StepFunction.empty()
    return eng.lambda0(eng.piece_weights(alpha, beta, z))


def product_limit_S0(lam: StepFunction) -> SurvivorCurve:
    """Product-limit survivor ``prod (1 - dLambda)``, held at 0 from the first jump >= 1."""
    if len(lam) == 0:
        return SurvivorCurve(np.empty(0), np.empty(0))
    factors = np.clip(1.0 - lam.increments, 0.0, None)
    surv = np.cumprod(factors)
    first = np.flatnonzero(lam.increments >= 1.0)
    if first.size:
        surv[first[0]:] = 0.0
    return SurvivorCurve(lam.jump_times, surv)


def profile_loglik(panel, spec: ModelSpec, alpha, beta, s_star: float = np.inf, z=None) -> float:
    """``sum_ij log rho(j-1) + log psi(X_i(S_ij) beta) - log S0(E_i(S_ij))``."""
    eng = _engine(panel, spec, s_star)
    if eng.ages.size == 0:
        raise ValidationError("profile likelihood needs at least one event")
    return eng.profile(alpha, beta, z)


def semiparam_marginal_loglik(panel, spec: ModelSpec, alpha, beta, xi, lam: StepFunction, s_star: float = np.inf) -> float:
    return _engine(panel, spec, s_star).marginal(alpha, beta, xi, lam)


@dataclass
class SemiparametricFit(FitResult):
    lambda0: Optional[StepFunction] = None
    survivor: Optional[SurvivorCurve] = None


def _layout(spec: ModelSpec, q: int) -> ParamLayout:
    return ParamLayout(replace(spec, baseline="nonparametric"), q)


def _nm(f, u0, max_iter):
    res = optimize.minimize(
        f, u0, method="Nelder-Mead",
        options={"xatol": 1e-8, "fatol": 1e-8, "maxiter": max_iter, "maxfev": 4 * max_iter},
    )
    return res


def _profile_search(eng, spec, layout, init: Parameters, z=None, restarts=3, max_iter=2000, seed=0):
    def params_of(u):
        return layout.unpack(layout.from_free(u))

    def neg(u):
        p = params_of(u)
        val = -eng.profile(p.alpha, p.beta, z)
        return val if np.isfinite(val) else np.inf

    u0 = layout.to_free(layout.pack(init))
    if u0.size == 0:
        return init, -neg(u0), True, 0
    best = _nm(neg, u0, max_iter)
    runs = [best]
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        start = u0 + rng.normal(0.0, 0.1, size=u0.size)
        runs.append(_nm(neg, start, max_iter))
    best = min(runs, key=lambda r: r.fun)
    if restarts:
        # a restart from the best vertex guards against a collapsed simplex
        final = _nm(neg, best.x, max_iter)
        if final.fun <= best.fun:
            best = final
    iters = int(sum(r.nit for r in runs))
    converged = bool(best.success)
    return params_of(best.x), -float(best.fun), converged, iters


def _check_events(eng):
    if eng.ages.size == 0:
        raise ValidationError("panel has no events")


def maximize_profile(panel, spec: ModelSpec, s_star: float = np.inf, init: Optional[Parameters] = None,
                     restarts: int = 3, jackknife: bool = False, seed: int = 0) -> SemiparametricFit:
    """Profile-likelihood estimates of ``(alpha, beta)`` by Nelder-Mead over ``(log alpha, beta)``.

    The baseline estimate and its product-limit survivor are evaluated at
    the maximizer. ``seed`` drives the perturbed restarts.
    """
    eng = _engine(panel, spec, s_star)
    _check_events(eng)
    q = eng.design.q
    layout = _layout(replace(spec, frailty="none"), q)
    if init is None:
        init = _default_init(eng, spec)
    est, ll, converged, iters = _profile_search(eng, spec, layout, init, restarts=restarts, seed=seed)
    est = replace(est, theta=(), xi=float("inf"))
    lam = eng.lambda0(eng.piece_weights(est.alpha, est.beta))
    se = np.full(layout.size, np.nan)
    se_method = "none"
    if jackknife:
        se = _jackknife(eng, spec, layout, est, lambda e, s, p: _profile_search(e, s, layout, p, restarts=0)[0])
        se_method = "jackknife"
    if not converged:
        log.warning("profile search did not converge")
    return SemiparametricFit(
        spec, est, layout.names, se, ll, converged, iters, float("nan"), None, jackknife, se_method,
        "profile", [ll], {}, lam, product_limit_S0(lam),
    )


def _default_init(eng, spec) -> Parameters:
    if spec.rho_family == "jelinski_moranda":
        alpha = float(eng.design.n_events.max() + 1)
    elif spec.rho_family == "loadshare":
        alpha = tuple([1.0] * spec.n_alpha())
    else:
        alpha = 1.0
    return Parameters((), alpha, tuple([0.0] * eng.design.q), 5.0)


def _jackknife(eng, spec, layout, est, refit):
    d = eng.design
    n = d.n_units
    if n < 2:
        raise ValidationError("jackknife needs at least two units")
    ests = []
    for i in range(n):
        sub = GapScalePanel(d.subset(np.delete(np.arange(n), i)), spec)
        ests.append(layout.pack(refit(sub, spec, est)))
    ests = np.asarray(ests)
    with np.errstate(invalid="ignore"):
        return np.sqrt((n - 1) / n * np.sum((ests - ests.mean(axis=0)) ** 2, axis=0))


def _em_step(eng, spec, layout, cur: Parameters, lam: StepFunction):
    A = eng.unit_cumhaz(cur.alpha, cur.beta, lam)
    ez, elogz = gamma_estep(eng.design.n_events, A, cur.xi)
    new, _, _, _ = _profile_search(eng, spec, layout, cur, z=ez, restarts=0)
    if eng.profile(new.alpha, new.beta, ez) < eng.profile(cur.alpha, cur.beta, ez):
        new = cur
    lam = eng.lambda0(eng.piece_weights(new.alpha, new.beta, ez))
    return replace(new, theta=(), xi=update_xi(ez, elogz)), lam


def semiparam_em_step(panel, spec: ModelSpec, params: Parameters, lam: StepFunction, s_star: float = np.inf):
    """One EM iteration from ``(params, lam)``; returns the updated ``(Parameters, StepFunction)``."""
    eng = _engine(panel, spec, s_star)
    layout = _layout(replace(spec, frailty="none"), eng.design.q)
    return _em_step(eng, spec, layout, replace(params, theta=()), lam)


def _em_loop(eng, spec, start: Parameters, lam: StepFunction, tol, max_iter):
    layout = _layout(replace(spec, frailty="none"), eng.design.q)
    cur = replace(start, theta=())
    trace = [eng.marginal(cur.alpha, cur.beta, cur.xi, lam)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new, lam = _em_step(eng, spec, layout, cur, lam)
        change = np.max(np.abs(np.r_[layout.pack(new) - layout.pack(cur), 1.0 / new.xi - 1.0 / cur.xi]))
        cur = new
        trace.append(eng.marginal(cur.alpha, cur.beta, cur.xi, lam))
        if change < tol:
            converged = True
            break
    return cur, cur.xi, lam, trace, converged, it


def semiparam_em_fit(panel, spec: ModelSpec, s_star: float = np.inf, init: Optional[Parameters] = None,
                     tol: float = 1e-6, max_iter: int = 500, jackknife: bool = False,
                     seed: int = 0) -> SemiparametricFit:
    """Gamma-frailty EM with a nonparametric baseline.

    Seeds ``(alpha, beta, Lambda0)`` from the no-frailty profile fit. Each
    iteration computes posterior frailty moments, maximizes the
    frailty-weighted profile likelihood, re-estimates the baseline with the
    weighted at-risk process, and updates ``xi``. ``xi`` is reported
    infinite when the frailty fit does not improve on the no-frailty fit.
    """
    if spec.frailty != "gamma":
        raise ValidationError("semiparam_em_fit needs a gamma frailty model")
    eng = _engine(panel, spec, s_star)
    _check_events(eng)
    nofr = maximize_profile(eng, replace(spec, frailty="none"), seed=seed)
    start = nofr.estimates
    if init is not None:
        start = replace(start, alpha=init.alpha, beta=init.beta)
    start = replace(start, xi=init.xi if init is not None and np.isfinite(init.xi) else 5.0)
    cur, xi, lam, trace, converged, iters = _em_loop(eng, spec, start, nofr.lambda0, tol, max_iter)
    ll = trace[-1]
    ll_nf = eng.marginal(nofr.estimates.alpha, nofr.estimates.beta, np.inf, nofr.lambda0)
    layout = _layout(spec, eng.design.q)
    if 1.0 / xi < 1.0 / XI_INF_THRESHOLD or ll <= ll_nf + 1e-8:
        cur, lam, ll = replace(nofr.estimates, xi=float("inf")), nofr.lambda0, ll_nf
    est = replace(cur, theta=())
    se = np.full(layout.size, np.nan)
    se_method = "none"
    if jackknife:
        def refit(sub, s, p):
            nf = maximize_profile(sub, replace(s, frailty="none"), restarts=0, init=p)
            st = replace(p, xi=p.xi if np.isfinite(p.xi) else 5.0)
            c, x, _, _, _, _ = _em_loop(sub, s, st, nf.lambda0, tol, max_iter)
            return replace(c, xi=x)
        se = _jackknife(eng, spec, layout, est, refit)
        se_method = "jackknife"
    if not converged:
        log.warning("semiparametric EM did not converge in %d iterations", max_iter)
    extra = {"xi_at_boundary": bool(np.isinf(est.xi)), "loglik_no_frailty": ll_nf}
    return SemiparametricFit(
        spec, est, layout.names, se, ll, converged, iters, float("nan"), None, jackknife, se_method,
        "semiparametric-em", trace, extra, lam, product_limit_S0(lam),
    )
