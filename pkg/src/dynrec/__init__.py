"""Simulation and estimation for dynamic recurrent-event models.

A unit's intensity is ``Z * Y(s) * lambda0(E(s)) * rho(N(s-); alpha) * psi(X(s) beta)``
with an effective age ``E``, an event-count modulation ``rho``, a covariate
link ``psi`` and an optional gamma frailty ``Z``.
"""

from .errors import ConvergenceError, ValidationError
from .hazard import (
    StepFunction,
    SurvivorCurve,
    WeibullBaseline,
    partition_product,
    product_integral,
    weibull_cumhaz,
)
from .model import (
    EventHistory,
    ModelSpec,
    Parameters,
    compensator,
    intensity,
    martingale_residual,
    n_dagger,
    psi_eval,
    rho_eval,
    y_dagger,
)
from .age import BbsConfig, EffectiveAgeTrajectory, build_trajectory, trajectories_for
from .simulate import CensoringSpec, CovariateGenerator, SimConfig, predict_future, simulate_panel, simulate_unit
from .parametric import (
    FitResult,
    em_fit,
    jackknife_se,
    loglik_conditional,
    loglik_gamma_frailty,
    loglik_nofrailty,
    mle_fit,
    observed_information,
)
from .semiparametric import (
    SemiparametricFit,
    at_risk_Y,
    breslow_lambda0,
    build_segments,
    maximize_profile,
    product_limit_S0,
    profile_loglik,
    s0_aggregate,
    semiparam_em_fit,
)
from .io import load_config, load_fit, load_panel, save_fit, save_panel, save_stepfunction, save_survivor

__version__ = "0.1.0"
