import math

import numpy as np
import pytest

from oracles import gamma_quadrature_unit, gap_sample, kaplan_meier, nelson_aalen

from dynrec.errors import ValidationError
from dynrec.hazard import StepFunction
from dynrec.model import EventHistory, ModelSpec, Parameters, psi_eval, rho_eval
from dynrec.semiparametric import (
    at_risk_Y,
    breslow_lambda0,
    build_segments,
    maximize_profile,
    product_limit_S0,
    profile_loglik,
    s0_aggregate,
    semiparam_em_fit,
    semiparam_em_step,
    semiparam_marginal_loglik,
)
from dynrec.simulate import CensoringSpec, CovariateGenerator, SimConfig, simulate_panel

RENEWAL = ModelSpec(baseline="nonparametric", age_policy="perfect", link="unit")
HAND = EventHistory("u", 9.0, [3.0, 7.0])
NORMAL1 = CovariateGenerator("iid", dists=(("normal", {"mean": 0.0, "sd": 1.0}),))


def _renewal_panel(n, seed, tau=3.0, theta=(1.4, 1.0)):
    spec = ModelSpec(age_policy="perfect", link="unit")
    return simulate_panel(SimConfig(n, spec, Parameters(theta), CensoringSpec("uniform", low=0.5, high=tau), seed=seed))


def test_renewal_segments():
    seg = build_segments([HAND], RENEWAL, 1.0, ())[0]
    assert np.array_equal(seg.lo, [0.0, 0.0, 0.0])
    assert np.array_equal(seg.hi, [3.0, 4.0, 2.0])
    assert np.array_equal(seg.weight, [1.0, 1.0, 1.0])


def test_geometric_segment_weight():
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect", link="unit")
    seg = build_segments([HAND], spec, 2.0, ())[0]
    assert seg.weight[1] == 2.0


def test_minimal_segments_are_calendar_intervals():
    spec = ModelSpec(baseline="nonparametric", age_policy="minimal", link="unit")
    seg = build_segments([EventHistory("u", 6.0, [2.0, 5.0])], spec, 1.0, ())[0]
    assert np.array_equal(seg.lo, [0.0, 2.0, 5.0])
    assert np.array_equal(seg.hi, [2.0, 5.0, 6.0])


def test_at_risk_examples():
    seg = build_segments([HAND], RENEWAL, 1.0, ())[0]
    assert at_risk_Y(seg, 2.5) == 2.0
    assert at_risk_Y(seg, 3.0) == 2.0
    assert at_risk_Y(seg, 4.5) == 0.0


def test_s0_additive():
    segs = build_segments([HAND], RENEWAL, 1.0, ())
    t = np.array([0.5, 2.5, 3.5])
    assert np.array_equal(s0_aggregate(segs, t), at_risk_Y(segs[0], t))
    assert np.array_equal(s0_aggregate(segs * 2, t), 2 * at_risk_Y(segs[0], t))
    assert np.array_equal(s0_aggregate(segs * 2, t, z=[1.0, 1.0]), s0_aggregate(segs * 2, t))


def test_hand_breslow():
    lam = breslow_lambda0([HAND], RENEWAL, 1.0, ())
    assert np.array_equal(lam.jump_times, [3.0, 4.0])
    assert np.array_equal(lam.increments, [0.5, 1.0])
    assert lam(4.0) == 1.5


def test_breslow_empty_panel():
    lam = breslow_lambda0([EventHistory("u", 2.0, [])], RENEWAL, 1.0, ())
    assert len(lam) == 0


def test_hand_product_limit():
    surv = product_limit_S0(breslow_lambda0([HAND], RENEWAL, 1.0, ()))
    assert np.array_equal(surv.values, [0.5, 0.0])
    assert surv(2.9) == 1.0
    assert len(product_limit_S0(StepFunction.empty()).values) == 0
    assert product_limit_S0(StepFunction.empty())(5.0) == 1.0


def test_product_limit_clamps_after_jump_above_one():
    surv = product_limit_S0(StepFunction([1.0, 2.0, 3.0], [0.5, 1.5, 0.2]))
    assert np.array_equal(surv.values, [0.5, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_single_event_reduction_to_nelson_aalen(seed):
    rng = np.random.default_rng(seed)
    panel = []
    for i in range(25):
        tau = float(rng.uniform(1, 3))
        t = float(rng.exponential())
        panel.append(EventHistory(str(i), tau, [t] if t < tau else []))
    lam = breslow_lambda0(panel, RENEWAL, 1.0, ())
    jt, inc = nelson_aalen(*gap_sample(panel))
    assert np.array_equal(lam.jump_times, jt)
    assert np.array_equal(lam.increments, inc)


@pytest.mark.parametrize("seed", range(5))
def test_renewal_reduction_and_km(seed):
    panel = _renewal_panel(30, seed)
    lam = breslow_lambda0(panel, RENEWAL, 1.0, ())
    times, observed = gap_sample(panel)
    jt, inc = nelson_aalen(times, observed)
    assert np.array_equal(lam.jump_times, jt) and np.array_equal(lam.increments, inc)
    kt, ks = kaplan_meier(times, observed)
    surv = product_limit_S0(lam)
    assert np.allclose(surv.values, ks, rtol=0, atol=1e-14)


def test_mass_conservation():
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="minimal")
    panel = simulate_panel(SimConfig(40, ModelSpec(rho_family="geometric"), Parameters((1.2, 1.0), 1.1, (0.5,)),
                                     CensoringSpec("fixed", tau=3.0, stop_after=10), NORMAL1, seed=3))
    alpha, beta = 1.1, (0.5,)
    lam = breslow_lambda0(panel, spec, alpha, beta)
    s0 = s0_aggregate(build_segments(panel, spec, alpha, beta), lam.jump_times)
    assert np.sum(lam.increments * s0) == pytest.approx(sum(h.n_events for h in panel), rel=1e-12)


def test_profile_trivial_terms():
    panel = _renewal_panel(20, 1)
    lam = breslow_lambda0(panel, RENEWAL, 1.0, ())
    segs = build_segments(panel, RENEWAL, 1.0, ())
    ages = np.concatenate([h.gaps for h in panel])
    expected = -np.sum(np.log(s0_aggregate(segs, ages)))
    assert profile_loglik(panel, RENEWAL, 1.0, ()) == pytest.approx(expected, rel=1e-13)
    assert len(lam) > 0


def test_profile_single_unit_single_event():
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect")
    h = EventHistory("u", 5.0, [2.0], (0.7,))
    # own at-risk weight at age 2 is psi; the censored segment (0, 3] adds rho(1) psi
    val = profile_loglik([h], spec, 1.5, (0.4,))
    psi = math.exp(0.28)
    assert val == pytest.approx(math.log(psi) - math.log(psi + 1.5 * psi))
    h = EventHistory("u", 2.0, [2.0], (0.7,))
    assert profile_loglik([h], spec, 1.5, (0.4,)) == pytest.approx(0.0, abs=1e-14)


def test_profile_rescaling_invariance():
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect")
    panel = simulate_panel(SimConfig(30, ModelSpec(age_policy="perfect"), Parameters((1.2, 1.0), 1.0, (0.5,)),
                                     CensoringSpec("fixed", tau=3.0), NORMAL1, seed=8))
    scaled = [EventHistory(h.unit_id, h.tau, h.event_times, tuple(2.0 * h.cov_values[0])) for h in panel]
    a = profile_loglik(panel, spec, 1.2, (0.6,))
    b = profile_loglik(scaled, spec, 1.2, (0.3,))
    assert a == pytest.approx(b, rel=1e-12)
    fa = maximize_profile(panel, spec)
    fb = maximize_profile(scaled, spec)
    assert fb.estimates.beta[0] == pytest.approx(fa.estimates.beta[0] / 2.0, rel=1e-4)


def test_profile_needs_events():
    with pytest.raises(ValidationError):
        profile_loglik([EventHistory("u", 2.0, [])], RENEWAL, 1.0, ())


def test_maximize_profile_reduction():
    panel = _renewal_panel(30, 4)
    fit = maximize_profile(panel, RENEWAL)
    jt, inc = nelson_aalen(*gap_sample(panel))
    assert np.array_equal(fit.lambda0.jump_times, jt) and np.array_equal(fit.lambda0.increments, inc)
    assert fit.names == []


def test_maximize_profile_unit_alpha_on_renewal_data():
    panel = _renewal_panel(300, 5, tau=4.0)
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect", link="unit")
    fit = maximize_profile(panel, spec, jackknife=True)
    assert fit.converged
    assert abs(fit.estimates.alpha - 1.0) < 3 * fit.standard_errors[0]


def test_maximize_profile_is_a_maximum():
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect")
    panel = simulate_panel(SimConfig(100, ModelSpec(rho_family="geometric", age_policy="perfect"),
                                     Parameters((1.0, 1.0), 1.2, (0.5,)), CensoringSpec("fixed", tau=2.0, stop_after=10),
                                     NORMAL1, seed=6))
    fit = maximize_profile(panel, spec)
    a, b = fit.estimates.alpha, fit.estimates.beta[0]
    best = profile_loglik(panel, spec, a, (b,))
    assert best == pytest.approx(fit.loglik)
    for da, db in ((1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)):
        assert profile_loglik(panel, spec, a * (1 + da), (b + db,)) <= best + 1e-9


def _semi_oracle(panel, spec, alpha, beta, xi, lam):
    """Marginal criterion unit by unit: A_i and the event terms summed by hand, z integrated out."""
    total = 0.0
    for h, seg in zip(panel, build_segments(panel, spec, alpha, beta)):
        A = float(np.sum(seg.weight * (lam(seg.hi) - lam(seg.lo))))
        S = 0.0
        prev = 0.0
        for j, s in enumerate(h.event_times):
            e = s - prev
            x = h.cov_values[0]
            S += math.log(rho_eval(spec.rho_family, j, alpha) * psi_eval(spec.link, float(x @ np.asarray(beta))))
            S += math.log(lam(e) - lam.left_limit(e))
            prev = s
        total += gamma_quadrature_unit(h.n_events, A, S, xi)
    return total


def test_semiparametric_marginal_matches_quadrature():
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect", frailty="gamma")
    sim = ModelSpec(rho_family="geometric", age_policy="perfect", frailty="gamma")
    panel = simulate_panel(SimConfig(6, sim, Parameters((1.0, 1.0), 1.2, (0.5,), 1.0),
                                     CensoringSpec("fixed", tau=2.0, stop_after=4), NORMAL1, seed=2))
    lam = breslow_lambda0(panel, spec, 1.2, (0.5,))
    for xi in (0.5, 1.0, 4.0):
        val = semiparam_marginal_loglik(panel, spec, 1.2, (0.5,), xi, lam)
        assert val == pytest.approx(_semi_oracle(panel, spec, 1.2, (0.5,), xi, lam), rel=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_em_step_from_truth_does_not_decrease(seed):
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect", frailty="gamma")
    sim = ModelSpec(rho_family="geometric", age_policy="perfect", frailty="gamma")
    truth = Parameters((1.0, 1.0), 1.2, (0.5,), 1.0)
    panel = simulate_panel(SimConfig(8, sim, truth, CensoringSpec("fixed", tau=2.0, stop_after=4), NORMAL1, seed=seed))
    lam = breslow_lambda0(panel, spec, truth.alpha, truth.beta)
    before = _semi_oracle(panel, spec, truth.alpha, truth.beta, truth.xi, lam)
    new, lam2 = semiparam_em_step(panel, spec, truth, lam)
    after = _semi_oracle(panel, spec, new.alpha, new.beta, new.xi, lam2)
    assert after >= before - 1e-8


def test_semiparam_em_boundary():
    panel = [EventHistory(str(i), 4.0, [1.0, 2.0, 3.0, 4.0], ((-1.0) ** i,)) for i in range(20)]
    spec = ModelSpec(baseline="nonparametric", age_policy="perfect", frailty="gamma")
    fit = semiparam_em_fit(panel, spec)
    assert math.isinf(fit.estimates.xi)
    assert fit.extra["xi_at_boundary"]


def test_semiparam_em_monotone_and_recovers_frailty():
    spec = ModelSpec(baseline="nonparametric", rho_family="geometric", age_policy="perfect", frailty="gamma")
    sim = ModelSpec(rho_family="geometric", age_policy="perfect", frailty="gamma")
    panel = simulate_panel(SimConfig(300, sim, Parameters((1.0, 1.0), 1.2, (0.5,), 1.0),
                                     CensoringSpec("fixed", tau=2.0, stop_after=10), NORMAL1, seed=12))
    fit = semiparam_em_fit(panel, spec)
    assert fit.converged
    assert np.all(np.diff(fit.trace) >= -1e-8)
    assert 0.5 < fit.estimates.xi < 2.0
    assert abs(fit.estimates.alpha - 1.2) < 0.1


def test_semiparam_em_requires_gamma():
    with pytest.raises(ValidationError):
        semiparam_em_fit([HAND], RENEWAL)
