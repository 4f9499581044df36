"""Likelihoods and maximum-likelihood fitting with a parametric (Weibull) baseline.

All likelihoods are evaluated on a :class:`~dynrec.model.PanelDesign`, so a
panel is flattened once and every parameter point costs a handful of
vectorised array operations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .age import trajectories_for
from .errors import ConvergenceError, ValidationError
from .hazard import WeibullBaseline
from .model import ModelSpec, PanelDesign, Parameters, build_design, piece_baseline_integral, piece_multiplier

__all__ = [
    "XI_CAP_LOG",
    "ParamLayout",
    "FitResult",
    "as_design",
    "unit_compensators",
    "loglik_conditional",
    "loglik_nofrailty",
    "loglik_gamma_frailty",
    "numerical_hessian",
    "observed_information",
    "initial_parameters",
    "mle_fit",
    "gamma_estep",
    "update_xi",
    "em_fit",
    "jackknife_se",
]

log = logging.getLogger(__name__)

XI_CAP_LOG = 30.0
XI_INF_THRESHOLD = 1e8


class ParamLayout:
    """Maps :class:`Parameters` to flat vectors, natural or unconstrained.

    Order: ``theta1, theta2`` (Weibull), alphas, betas, ``xi`` (gamma frailty).
    Positive parameters are log-transformed on the unconstrained scale;
    ``log xi`` is capped at ``XI_CAP_LOG``.
    """

    def __init__(self, spec: ModelSpec, q: int, with_xi: Optional[bool] = None):
        self.spec = spec
        self.q = q
        # beta is not identified under the unit link
        self.q_free = 0 if spec.link == "unit" else q
        self.n_theta = 2 if spec.baseline == "weibull" else 0
        self.n_alpha = spec.n_alpha()
        self.with_xi = spec.frailty == "gamma" if with_xi is None else with_xi
        names = ["theta1", "theta2"][: self.n_theta]
        if self.n_alpha == 1 and spec.rho_family != "loadshare":
            names.append("alpha")
        else:
            names += [f"alpha{k}" for k in range(1, self.n_alpha + 1)]
        names += [f"beta{j}" for j in range(1, self.q_free + 1)]
        if self.with_xi:
            names.append("xi")
        self.names = names
        self.size = len(names)
        positive = np.zeros(self.size, dtype=bool)
        positive[: self.n_theta + self.n_alpha] = True
        if self.with_xi:
            positive[-1] = True
        self.positive = positive

    def pack(self, p: Parameters) -> np.ndarray:
        out = list(p.theta[: self.n_theta])
        if self.n_alpha:
            out += list(np.atleast_1d(p.alpha))
        if self.q_free:
            out += list(p.beta)
        if self.with_xi:
            out.append(p.xi)
        return np.asarray(out, dtype=float)

    def unpack(self, v, xi: Optional[float] = None) -> Parameters:
        v = np.asarray(v, dtype=float)
        i = 0
        theta = tuple(v[i : i + self.n_theta]) if self.n_theta else ()
        i += self.n_theta
        if self.n_alpha == 0:
            alpha = 1.0
        elif self.spec.rho_family == "loadshare":
            alpha = tuple(v[i : i + self.n_alpha])
        else:
            alpha = float(v[i])
        i += self.n_alpha
        beta = tuple(v[i : i + self.q_free]) if self.q_free else (0.0,) * self.q
        i += self.q_free
        if self.with_xi:
            xi = float(v[i])
        elif xi is None:
            xi = float("inf")
        return Parameters(theta, alpha, beta, xi)

    def to_free(self, natural) -> np.ndarray:
        u = np.array(natural, dtype=float)
        u[self.positive] = np.log(u[self.positive])
        return u

    def from_free(self, u) -> np.ndarray:
        v = np.array(u, dtype=float)
        if self.with_xi:
            v[-1] = min(v[-1], XI_CAP_LOG)
        v[self.positive] = np.exp(v[self.positive])
        return v


@dataclass
class FitResult:
    """Point estimates with standard errors and a convergence report.

    ``standard_errors`` follows ``names``; ``vcov`` is the inverse observed
    information over the parameters with finite estimates (``xi = inf`` is
    excluded and gets a NaN standard error).
    """

    spec: ModelSpec
    estimates: Parameters
    names: list
    standard_errors: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    grad_norm: float
    vcov: Optional[np.ndarray] = None
    se_reliable: bool = True
    se_method: str = "observed information"
    method: str = "mle"
    trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def estimate_vector(self) -> np.ndarray:
        return ParamLayout(self.spec, len(self.estimates.beta)).pack(self.estimates)

    def rows(self):
        """``(parameter, estimate, s.e.)`` triples."""
        return list(zip(self.names, self.estimate_vector.tolist(), np.asarray(self.standard_errors).tolist()))


def as_design(panel, spec: ModelSpec, s_star: float = np.inf) -> PanelDesign:
    if isinstance(panel, PanelDesign):
        return panel
    return build_design(list(panel), trajectories_for(panel, spec), s_star)


def _terms(design: PanelDesign, spec: ModelSpec, params: Parameters, baseline=None):
    """Per-unit ``A_i`` and per-event ``log B_i(S_ij)``."""
    base = baseline if baseline is not None else WeibullBaseline(*params.theta)
    # trial points far from the optimum may overflow; the resulting inf is handled by callers
    with np.errstate(over="ignore", invalid="ignore"):
        mult = piece_multiplier(design, spec, params.alpha, params.beta)
        A = np.bincount(design.unit, weights=mult * piece_baseline_integral(design, base), minlength=design.n_units)
    ev = design.event
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if hasattr(base, "log_hazard"):
            logb = base.log_hazard(design.e_b[ev]) + np.log(mult[ev])
        else:
            logb = np.log(np.asarray([base.hazard(e) for e in design.e_b[ev]]) * mult[ev])
    return A, logb, design.unit[ev], design.k[ev]


def unit_compensators(panel, spec: ModelSpec, params: Parameters, s_star: float = np.inf) -> np.ndarray:
    """``A_i = int_0^{s* ^ tau_i} B_i(w) dw`` for every unit."""
    return _terms(as_design(panel, spec, s_star), spec, params)[0]


def loglik_conditional(panel, spec: ModelSpec, params: Parameters, z, s_star: float = np.inf) -> float:
    """Log-likelihood given frailties ``z``: ``sum_i N_i log z_i + sum log B - z_i A_i``."""
    design = as_design(panel, spec, s_star)
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValidationError("frailties must be nonnegative")
    A, logb, _, _ = _terms(design, spec, params)
    with np.errstate(divide="ignore", invalid="ignore"):
        zterm = np.where(design.n_events > 0, design.n_events * np.log(z), 0.0)
    return float(np.sum(zterm) + np.sum(logb) - np.sum(z * A))


def loglik_nofrailty(panel, spec: ModelSpec, params: Parameters, s_star: float = np.inf) -> float:
    design = as_design(panel, spec, s_star)
    A, logb, _, _ = _terms(design, spec, params)
    return float(np.sum(logb) - np.sum(A))


def _gamma_marginal(A, logb, ev_unit, ev_k, xi, n_units):
    if np.isinf(xi):
        return float(np.sum(logb) - np.sum(A))
    if np.any(~np.isfinite(A)):
        raise ValidationError("infinite cumulative intensity")
    head = -xi * np.log1p(A / xi)
    ev = np.log1p(ev_k / xi) + logb - np.log1p(A[ev_unit] / xi)
    return float(np.sum(head) + np.sum(ev))


def loglik_gamma_frailty(panel, spec: ModelSpec, params: Parameters, xi: Optional[float] = None, s_star: float = np.inf) -> float:
    """Gamma-frailty marginal log-likelihood.

    ``sum_i { xi log(xi/(xi+A_i)) + sum_j log[(N_i(S_ij-) + xi) B_i(S_ij) / (xi + A_i)] }``.
    """
    xi = params.xi if xi is None else float(xi)
    if not xi > 0:
        raise ValidationError("xi must be > 0")
    design = as_design(panel, spec, s_star)
    A, logb, ev_unit, ev_k = _terms(design, spec, params)
    return _gamma_marginal(A, logb, ev_unit, ev_k, xi, design.n_units)


def _marginal(design, spec, params):
    A, logb, ev_unit, ev_k = _terms(design, spec, params)
    if spec.frailty == "gamma":
        return _gamma_marginal(A, logb, ev_unit, ev_k, params.xi, design.n_units)
    return float(np.sum(logb) - np.sum(A))


def numerical_hessian(f, x, steps=None) -> np.ndarray:
    """Central-difference Hessian of ``f`` at ``x``; symmetric by construction."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = np.maximum(1e-4, 1e-4 * np.abs(x)) if steps is None else np.asarray(steps, dtype=float)
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return H


def _info_steps(x, positive):
    h = np.maximum(1e-4, 1e-4 * np.abs(x))
    # keep x - h inside the positive orthant
    h = np.where(positive, np.minimum(h, 0.5 * np.abs(x)), h)
    return h


def observed_information(panel, spec: ModelSpec, at: Parameters, s_star: float = np.inf, fixed=()):
    """Negative Hessian of the log-likelihood at ``at`` and its inverse.

    Returns ``(names, I, I_inv)``; ``xi`` is left out when infinite and
    parameters named in ``fixed`` are held at their values.
    """
    design = as_design(panel, spec, s_star)
    with_xi = spec.frailty == "gamma" and np.isfinite(at.xi)
    layout = ParamLayout(spec, design.q, with_xi=with_xi)
    fit_spec = spec if with_xi else replace(spec, frailty="none")
    full = layout.pack(at)
    free = np.array([n not in fixed for n in layout.names], dtype=bool)
    x = full[free]
    positive = layout.positive[free]

    def ll(v):
        if np.any(v[positive] <= 0):
            return -np.inf
        w = full.copy()
        w[free] = v
        return _marginal(design, fit_spec, layout.unpack(w))

    info = -numerical_hessian(ll, x, _info_steps(x, positive))
    try:
        inv = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise ValidationError("observed information is singular") from None
    return [n for n, f in zip(layout.names, free) if f], info, inv


def _weibull_moments(gaps):
    gaps = np.asarray(gaps, dtype=float)
    if gaps.size < 2 or gaps.std() <= 0:
        return 1.0, float(gaps.mean()) if gaps.size else 1.0
    cv2 = gaps.var() / gaps.mean() ** 2

    def g(logk):
        k = np.exp(logk)
        return np.exp(special.gammaln(1 + 2 / k) - 2 * special.gammaln(1 + 1 / k)) - 1 - cv2

    lo, hi = np.log(0.05), np.log(50.0)
    if g(lo) * g(hi) > 0:
        k = 1.0
    else:
        k = float(np.exp(optimize.brentq(g, lo, hi)))
    return k, float(gaps.mean() / special.gamma(1 + 1 / k))


def initial_parameters(design: PanelDesign, spec: ModelSpec) -> Parameters:
    """Crude start: Weibull by moments on completed gaps, ``alpha = 1``, ``beta = 0``, ``xi = 5``."""
    key = design.unit * (int(design.k.max(initial=0)) + 2) + design.k
    _, inv = np.unique(key, return_inverse=True)
    length = np.bincount(inv, weights=design.b - design.a)
    done = np.bincount(inv, weights=design.event.astype(float)) > 0
    gaps = length[done]
    if gaps.size == 0:
        total = float(np.sum(design.b - design.a))
        theta = (1.0, max(total, 1e-8))
    else:
        theta = _weibull_moments(gaps)
    if spec.rho_family == "jelinski_moranda":
        alpha = float(design.n_events.max() + 1)
    elif spec.rho_family == "loadshare":
        alpha = tuple([1.0] * spec.n_alpha())
    else:
        alpha = 1.0
    return Parameters(theta, alpha, tuple([0.0] * design.q), 5.0 if spec.frailty == "gamma" else float("inf"))


def _fd_grad(f, u, f0=None):
    """Fourth-order central differences; second-order ones leave O(1e-5) truncation error at sharp optima."""
    h = 1e-4 * np.maximum(1.0, np.abs(u))
    g = np.empty(u.size)
    for i in range(u.size):
        e = np.zeros(u.size)
        e[i] = h[i]
        with np.errstate(invalid="ignore"):
            g[i] = (8.0 * (f(u + e) - f(u - e)) - (f(u + 2 * e) - f(u - 2 * e))) / (12.0 * h[i])
    return g


def _maximize(negll, u0, max_iter=500):
    """BFGS on ``negll`` with central-difference gradients, then Newton polishing."""
    trace = []

    def cb(uk):
        trace.append(-negll(uk))

    res = optimize.minimize(
        negll, u0, jac=lambda u: _fd_grad(negll, u), method="BFGS", callback=cb,
        options={"gtol": 1e-7, "maxiter": max_iter},
    )
    u, fval = res.x, res.fun
    iters = int(res.nit)
    g = _fd_grad(negll, u)
    for _ in range(8):
        if np.linalg.norm(g) < 1e-7:
            break
        H = numerical_hessian(negll, u, np.full(u.size, 1e-4) * np.maximum(1.0, np.abs(u)))
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.any(np.linalg.eigvalsh(H) <= 0):
            break
        t = 1.0
        while t > 1e-4:
            cand = u - t * step
            fc = negll(cand)
            # near the optimum the decrease is below rounding noise
            if fc <= fval + 1e-14 * max(1.0, abs(fval)):
                u, fval = cand, fc
                break
            t /= 2.0
        else:
            break
        iters += 1
        trace.append(-fval)
        g = _fd_grad(negll, u)
    gnorm = float(np.linalg.norm(g))
    rel = abs(trace[-1] - trace[-2]) / max(1.0, abs(trace[-1])) if len(trace) >= 2 else 0.0
    return u, -float(fval), iters, gnorm, rel, trace


def _fit_design(design, spec, init, max_iter=500, fixed=None):
    with_xi = spec.frailty == "gamma"
    layout = ParamLayout(spec, design.q)
    if with_xi and not np.isfinite(init.xi):
        init = replace(init, xi=5.0)
    xi_fixed = None if with_xi else float("inf")
    fixed = fixed or {}
    unknown = set(fixed) - set(layout.names)
    if unknown:
        raise ValidationError(f"cannot fix unknown parameters {sorted(unknown)}")
    u_full = layout.to_free(layout.pack(init))
    free = np.ones(layout.size, dtype=bool)
    for name, value in fixed.items():
        j = layout.names.index(name)
        free[j] = False
        u_full[j] = np.log(value) if layout.positive[j] else value

    def to_params(u):
        w = u_full.copy()
        w[free] = u
        return layout.unpack(layout.from_free(w), xi=xi_fixed)

    def negll(u):
        try:
            val = -_marginal(design, spec, to_params(u))
        except (ValidationError, FloatingPointError, OverflowError):
            return np.inf
        return val if np.isfinite(val) else np.inf

    u, ll, iters, gnorm, rel, trace = _maximize(negll, u_full[free], max_iter)
    return to_params(u), ll, iters, gnorm, rel, trace


def _finish(design, spec, est, ll, iters, gnorm, rel, trace, method, fixed=()):
    converged = gnorm < 1e-6 and rel < 1e-10
    with_xi = spec.frailty == "gamma" and np.isfinite(est.xi)
    layout = ParamLayout(spec, design.q)
    se = np.full(layout.size, np.nan)
    vcov, reliable = None, False
    try:
        names, info, inv = observed_information(design, spec, est, fixed=tuple(fixed))
        reliable = bool(np.all(np.linalg.eigvalsh(info) > 0))
        vcov = inv
        diag = np.diag(inv)
        idx = [layout.names.index(n) for n in names]
        se[idx] = np.sqrt(np.where(diag >= 0, diag, np.nan))
    except ValidationError:
        pass
    if not reliable:
        log.warning("observed information is not positive definite; standard errors unreliable")
    if not converged:
        log.warning("optimizer stopped with gradient norm %.3g", gnorm)
    extra = {"xi_at_boundary": spec.frailty == "gamma" and not with_xi}
    return FitResult(spec, est, layout.names, se, ll, converged, iters, gnorm, vcov, reliable,
                     method=method, trace=trace, extra=extra)


def _no_frailty_fit(design, spec, init, max_iter, fixed=None):
    nf = replace(spec, frailty="none")
    fixed = {k: v for k, v in (fixed or {}).items() if k != "xi"}
    return _fit_design(design, nf, replace(init, xi=float("inf")), max_iter, fixed)


def _boundary_check(fit_full, fit_nf):
    """Report ``xi = inf`` when the interior optimum is no better than the no-frailty fit."""
    est, ll = fit_full[0], fit_full[1]
    if 1.0 / est.xi < 1.0 / XI_INF_THRESHOLD or ll <= fit_nf[1] + 1e-8:
        p, llnf = fit_nf[0], fit_nf[1]
        return (replace(p, xi=float("inf")), llnf) + tuple(fit_nf[2:])
    return fit_full


def mle_fit(panel, spec: ModelSpec, init: Optional[Parameters] = None, s_star: float = np.inf,
            max_iter: int = 500, fixed: Optional[dict] = None) -> FitResult:
    """Maximum-likelihood fit by quasi-Newton search on ``(log theta, log alpha, beta, log xi)``.

    With gamma frailty the no-frailty model is fitted too; ``xi`` is reported
    infinite when the frailty fit does not improve on it or ``1/xi < 1e-8``.
    ``fixed`` maps parameter names (e.g. ``{"theta1": 1.0}``) to values held
    fixed; their standard errors are NaN.
    """
    if spec.baseline != "weibull":
        raise ValidationError("mle_fit needs a parametric baseline; use the semiparametric fitters")
    design = as_design(panel, spec, s_star)
    if design.total_events == 0:
        raise ValidationError("panel has no events; the likelihood does not identify the parameters")
    if init is None:
        init = initial_parameters(design, spec)
    if spec.frailty == "gamma":
        nf = _no_frailty_fit(design, spec, init, max_iter, fixed)
        start = replace(nf[0], xi=init.xi if np.isfinite(init.xi) else 5.0)
        full = _boundary_check(_fit_design(design, spec, start, max_iter, fixed), nf)
    else:
        full = _fit_design(design, spec, init, max_iter, fixed)
    return _finish(design, spec, *full, method="mle", fixed=fixed or ())


def gamma_estep(n_events, A, xi):
    """Posterior ``E[Z]`` and ``E[log Z]`` for gamma(xi, xi) frailties.

    The posterior is gamma with shape ``N + xi`` and rate ``xi + A``.
    """
    n_events = np.asarray(n_events, dtype=float)
    A = np.asarray(A, dtype=float)
    if np.isinf(xi):
        return np.ones_like(A), np.zeros_like(A)
    shape, rate = n_events + xi, xi + A
    return shape / rate, special.digamma(shape) - np.log(rate)


def update_xi(ez, elogz) -> float:
    """Maximize ``sum_i xi log xi - log Gamma(xi) + (xi - 1) E[log Z_i] - xi E[Z_i]`` over ``xi``."""
    ez, elogz = np.asarray(ez), np.asarray(elogz)
    n = ez.size
    c = float(np.sum(elogz - ez))

    def score(logxi):
        xi = np.exp(logxi)
        return n * (logxi + 1.0 - special.digamma(xi)) + c

    lo, hi = -20.0, XI_CAP_LOG
    if score(hi) >= 0:
        return float(np.exp(hi))
    if score(lo) <= 0:
        return float(np.exp(lo))
    return float(np.exp(optimize.brentq(score, lo, hi, xtol=1e-12)))


def em_fit(panel, spec: ModelSpec, init: Optional[Parameters] = None, s_star: float = np.inf,
           tol: float = 1e-8, max_iter: int = 2000) -> FitResult:
    """EM fit of the gamma-frailty model treating the frailties as missing data.

    E-step: gamma posterior moments of ``Z_i``. M-step: maximize the
    expected complete-data log-likelihood in ``(theta, alpha, beta)`` with
    ``z_i = E[Z_i]``, then in ``xi``. Stops when the marginal
    log-likelihood changes by less than ``tol``.
    """
    if spec.frailty != "gamma":
        raise ValidationError("em_fit needs a gamma frailty model")
    if spec.baseline != "weibull":
        raise ValidationError("em_fit needs a parametric baseline")
    design = as_design(panel, spec, s_star)
    if design.total_events == 0:
        raise ValidationError("panel has no events; the likelihood does not identify the parameters")
    if init is None:
        init = initial_parameters(design, spec)
    nf_spec = replace(spec, frailty="none")
    layout = ParamLayout(nf_spec, design.q)
    cur = replace(init, xi=init.xi if np.isfinite(init.xi) else 5.0)
    ll = _marginal(design, spec, cur)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        A, _, _, _ = _terms(design, nf_spec, cur)
        ez, elogz = gamma_estep(design.n_events, A, cur.xi)

        def negq(u):
            p = layout.unpack(layout.from_free(u))
            try:
                A_, logb, _, _ = _terms(design, nf_spec, p)
            except ValidationError:
                return np.inf
            val = -(np.sum(logb) - np.sum(ez * A_))
            return val if np.isfinite(val) else np.inf

        u0 = layout.to_free(layout.pack(cur))
        q0 = negq(u0)
        res = optimize.minimize(negq, u0, jac=lambda u: _fd_grad(negq, u), method="BFGS",
                                options={"gtol": 1e-9, "maxiter": 200})
        u = res.x if res.fun <= q0 else u0
        nxt = layout.unpack(layout.from_free(u), xi=update_xi(ez, elogz))
        new_ll = _marginal(design, spec, nxt)
        trace.append(new_ll)
        cur = nxt
        if abs(new_ll - ll) < tol:
            converged = True
            ll = new_ll
            break
        ll = new_ll
    if not converged:
        log.warning("EM did not converge in %d iterations", max_iter)
    nf = _no_frailty_fit(design, spec, cur, 500)
    est, ll_final = cur, ll
    if 1.0 / cur.xi < 1.0 / XI_INF_THRESHOLD or ll <= nf[1] + 1e-8:
        est, ll_final = replace(nf[0], xi=float("inf")), nf[1]
    gvec = _fd_grad(lambda v: -_marginal(design, spec, ParamLayout(spec, design.q).unpack(v)),
                    ParamLayout(spec, design.q).pack(est)) if np.isfinite(est.xi) else np.zeros(1)
    fit = _finish(design, spec, est, ll_final, it, float(np.linalg.norm(gvec)), 0.0, trace, "em")
    fit.converged = converged
    return fit


def jackknife_se(panel, spec: ModelSpec, fit: FitResult, refit=None) -> np.ndarray:
    """Delete-one-unit jackknife standard errors, each refit warm-started at ``fit``.

    ``refit(design, spec, init)`` returns a Parameters; defaults to the MLE.
    """
    design = as_design(panel, spec)
    layout = ParamLayout(spec, design.q)
    if refit is None:
        def refit(d, s, init):
            return mle_fit(d, s, init=init).estimates
    n = design.n_units
    if n < 2:
        raise ValidationError("jackknife needs at least two units")
    ests = []
    for i in range(n):
        keep = np.delete(np.arange(n), i)
        ests.append(layout.pack(refit(design.subset(keep), spec, fit.estimates)))
    ests = np.asarray(ests)
    with np.errstate(invalid="ignore"):
        return np.sqrt((n - 1) / n * np.sum((ests - ests.mean(axis=0)) ** 2, axis=0))
