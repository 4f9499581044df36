import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrec.errors import ValidationError
from dynrec.hazard import StepFunction
from dynrec.io import load_config, load_fit, load_panel, load_stepfunction, parse_config, save_fit, save_panel, save_stepfunction
from dynrec.model import EventHistory, ModelSpec, Parameters
from dynrec.parametric import mle_fit
from dynrec.semiparametric import maximize_profile
from dynrec.simulate import CensoringSpec, CovariateGenerator, SimConfig, simulate_panel


def _write(tmp_path, text, name="panel.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_direct_parse(tmp_path):
    p = _write(tmp_path, "unit_id,time,status\nu1,2,1\nu1,5,1\nu1,6,0\n")
    (h,) = load_panel(p)
    assert h == EventHistory("u1", 6.0, [2.0, 5.0])


def test_unordered_rows(tmp_path):
    a = load_panel(_write(tmp_path, "unit_id,time,status\nu1,6,0\nu1,5,1\nu1,2,1\n"))
    assert a == [EventHistory("u1", 6.0, [2.0, 5.0])]


@pytest.mark.parametrize(
    "body",
    [
        "u1,7,1\nu1,6,0\n",
        "u1,2,1\n",
        "u1,2,1\nu1,2,1\nu1,6,0\n",
        "u1,2,1\nu1,6,0\nu1,7,0\n",
        "u1,abc,1\nu1,6,0\n",
        "u1,2,3\nu1,6,0\n",
        "u1,2,1,extra\nu1,6,0\n",
    ],
)
def test_invalid_panels(tmp_path, body):
    with pytest.raises(ValidationError):
        load_panel(_write(tmp_path, "unit_id,time,status\n" + body))


def test_non_numeric_covariate(tmp_path):
    with pytest.raises(ValidationError):
        load_panel(_write(tmp_path, "unit_id,time,status,x1\nu1,2,1,high\nu1,6,0,high\n"))


def test_header_checks(tmp_path):
    for header in ("id,time,status", "unit_id,time,status,x2", "unit_id,time,status,colour"):
        with pytest.raises(ValidationError):
            load_panel(_write(tmp_path, header + "\nu1,6,0" + ",1" * (header.count(",") - 2) + "\n"))
    with pytest.raises(ValidationError):
        load_panel(_write(tmp_path, ""))


def test_covariate_change_rows(tmp_path):
    text = "unit_id,time,status,x1\nu,0,2,0.5\nu,1.5,2,2\nu,1,1,0.5\nu,3,1,\nu,4,0,2\n"
    (h,) = load_panel(_write(tmp_path, text))
    assert h.covariates == ((0.0, (0.5,)), (1.5, (2.0,)))
    bad = text.replace("u,3,1,", "u,3,1,0.5")
    with pytest.raises(ValidationError):
        load_panel(_write(tmp_path, bad))


def test_interventions_parse(tmp_path):
    text = "unit_id,time,status,intervention\nu,1,1,P\nu,2,1,0.25\nu,3,1,M\nu,4,0,\n"
    (h,) = load_panel(_write(tmp_path, text))
    assert h.interventions == ("P", 0.25, "M")
    with pytest.raises(ValidationError):
        load_panel(_write(tmp_path, "unit_id,time,status,intervention\nu,4,0,P\n"))
    with pytest.raises(ValidationError):
        load_panel(_write(tmp_path, "unit_id,time,status,intervention\nu,1,1,Q\nu,4,0,\n"))


def test_empty_panel_header_only(tmp_path):
    p = tmp_path / "e.csv"
    save_panel(p, [])
    assert p.read_text() == "unit_id,time,status\n"
    assert load_panel(p) == []


_floats = st.floats(0.001, 100.0, allow_nan=False, allow_infinity=False)


@st.composite
def _unit(draw, uid, q, marks):
    tau = draw(_floats)
    ev = sorted(draw(st.sets(st.floats(1e-6, 1.0, exclude_min=False).map(lambda f: f * tau), max_size=5)))
    ev = [t for t in ev if 0 < t <= tau]
    cov = None
    if q:
        vec = st.tuples(*[st.floats(-1e6, 1e6, allow_nan=False) for _ in range(q)])
        if draw(st.booleans()):
            changes = sorted(draw(st.sets(st.floats(0.0, 1.0).map(lambda f: f * tau), max_size=3)) - {0.0})
            cov = [(0.0, draw(vec))] + [(t, draw(vec)) for t in changes if t > 0]
        else:
            cov = draw(vec)
    iv = None
    if marks:
        iv = tuple(draw(st.one_of(st.just("M"), st.just("P"), st.floats(0.0, 50.0))) for _ in ev)
    return EventHistory(uid, tau, ev, cov, iv)


@st.composite
def _panel(draw):
    q = draw(st.integers(0, 2))
    marks = draw(st.booleans())
    n = draw(st.integers(1, 5))
    return [draw(_unit(f"u{i}", q, marks)) for i in range(n)]


@settings(max_examples=100, deadline=None)
@given(_panel())
def test_roundtrip_random_panels(tmp_path_factory, panel):
    p = tmp_path_factory.mktemp("rt") / "p.csv"
    save_panel(p, panel)
    back = load_panel(p)
    assert back == panel
    save_panel(p.with_name("q.csv"), back)
    assert p.read_bytes() == p.with_name("q.csv").read_bytes()


def test_roundtrip_simulated_panel(tmp_path):
    cov = CovariateGenerator("iid", dists=(("normal", {"mean": 0.0, "sd": 1.0}), ("bernoulli", {"p": 0.5})))
    spec = ModelSpec(rho_family="geometric", age_policy="bbs", bbs_p=0.5)
    panel = simulate_panel(SimConfig(30, spec, Parameters((1.5, 1.0), 1.05, (-0.5, 0.3)),
                                     CensoringSpec("fixed", tau=4.0), cov, seed=5))
    save_panel(tmp_path / "s.csv", panel)
    assert load_panel(tmp_path / "s.csv") == panel


def test_stepfunction_roundtrip(tmp_path):
    sf = StepFunction([0.5, 1.25, 3.0], [0.1, 0.2, 1.0 / 3.0])
    save_stepfunction(tmp_path / "l.csv", sf)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "jump_time,increment,cumulative"
    cum = [float(r.split(",")[2]) for r in lines[1:]]
    assert cum == list(np.cumsum([0.1, 0.2, 1.0 / 3.0]))
    back = load_stepfunction(tmp_path / "l.csv")
    assert np.array_equal(back.jump_times, sf.jump_times) and np.array_equal(back.increments, sf.increments)


def test_fit_roundtrip(tmp_path):
    spec = ModelSpec(rho_family="geometric", age_policy="perfect", frailty="gamma")
    panel = [EventHistory(str(i), 4.0, [1.0, 2.0, 3.0, 4.0], ((-1.0) ** i,)) for i in range(20)]
    fit = mle_fit(panel, spec)
    save_fit(tmp_path / "f.tsv", fit, tmp_path / "f.json")
    rep = load_fit(tmp_path / "f.json")
    assert rep.spec == spec
    assert rep.estimates == fit.estimates and math.isinf(rep.estimates.xi)
    assert rep.names == fit.names
    assert np.array_equal(rep.standard_errors, fit.standard_errors, equal_nan=True)
    rows = (tmp_path / "f.tsv").read_text().splitlines()
    assert rows[0] == "parameter\testimate\tse" and len(rows) == len(fit.names) + 1


def test_semiparametric_fit_report_carries_baseline(tmp_path):
    panel = [EventHistory("u", 9.0, [3.0, 7.0])]
    spec = ModelSpec(baseline="nonparametric", age_policy="perfect", link="unit")
    fit = maximize_profile(panel, spec)
    save_fit(tmp_path / "f.tsv", fit, tmp_path / "f.json")
    rep = load_fit(tmp_path / "f.json")
    assert np.array_equal(rep.lambda0.increments, [0.5, 1.0])


def test_malformed_fit_report(tmp_path):
    (tmp_path / "bad.json").write_text('{"model": {}}')
    with pytest.raises(ValidationError):
        load_fit(tmp_path / "bad.json")


def test_minimal_config_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"n": 10}))
    cfg = load_config(p)
    assert cfg.sim.seed == 0
    assert cfg.sim.spec == ModelSpec()
    assert cfg.sim.params == Parameters()
    assert cfg.study.reps == 100 and cfg.study.fit == "mle"


def test_full_config():
    cfg = parse_config({
        "n": 50, "seed": 3,
        "model": {"rho": "jm", "link": "exp", "age": "perfect", "frailty": "gamma"},
        "params": {"theta": [1.5, 1.0], "alpha": 4, "beta": [0.2], "xi": 2.0},
        "censoring": {"type": "uniform", "low": 1, "high": 3, "stop_after": 5},
        "covariates": {"type": "iid", "dists": [{"dist": "normal", "mean": 0, "sd": 2}]},
        "study": {"reps": 7, "fit": "em", "fit_model": {"baseline": "nonparametric"}},
    })
    assert cfg.sim.spec.rho_family == "jelinski_moranda"
    assert cfg.sim.censoring.stop_after == 5
    assert cfg.study.fit_spec.baseline == "nonparametric" and cfg.study.fit_spec.frailty == "gamma"


@pytest.mark.parametrize(
    "d",
    [
        {"n": 5, "model": {"rho": "poisson"}},
        {"n": 5, "colour": 1},
        {"n": 5, "censoring": {"type": "fixed", "tua": 2}},
        {"n": 5, "params": {"xi": 2.0}},
        {"n": -1},
        {"seed": 1},
        {"n": 5, "study": {"fit": "bayes"}},
    ],
)
def test_config_rejections(d):
    with pytest.raises(ValidationError):
        parse_config(d)


def test_config_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{n: 1")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "c.json")
