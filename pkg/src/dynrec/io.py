"""Text formats for panels, step functions, fit reports and run configurations.

Panel CSV (counting-process long format)::

    unit_id,time,status,x1,...,xq,intervention

``status`` is 1 for an event, 0 for the single censoring row (``time = tau``)
and 2 for a covariate change (the new value applies just after ``time``; a
unit with changing covariates lists its baseline value as a status-2 row at
time 0). Event and censoring rows may leave covariate cells blank; when
filled they must equal the value in force. ``intervention`` is ``M``, ``P``,
or a restart age on event rows and blank elsewhere. Floats are written with
17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ValidationError
from .hazard import StepFunction, SurvivorCurve
from .model import AGE_POLICIES, BASELINES, FRAILTIES, EventHistory, ModelSpec, Parameters, covariate_at
from .simulate import CensoringSpec, CovariateGenerator, SimConfig

__all__ = [
    "load_panel",
    "save_panel",
    "save_stepfunction",
    "load_stepfunction",
    "save_survivor",
    "save_fit",
    "load_fit",
    "load_config",
    "RunConfig",
    "StudySettings",
    "model_spec",
    "RHO_ALIASES",
    "LINK_ALIASES",
]

RHO_ALIASES = {
    "constant": "constant",
    "geometric": "geometric",
    "jm": "jelinski_moranda",
    "jelinski_moranda": "jelinski_moranda",
    "loadshare": "loadshare",
}
LINK_ALIASES = {"unit": "unit", "exp": "exponential", "exponential": "exponential"}


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _num(text: str, what: str, line: int) -> float:
    try:
        val = float(text)
    except ValueError:
        raise ValidationError(f"line {line}: non-numeric {what} {text!r}") from None
    if not math.isfinite(val):
        raise ValidationError(f"line {line}: non-finite {what} {text!r}")
    return val


def _mark(text: str, line: int):
    text = text.strip()
    if text == "":
        return None
    if text in ("M", "P"):
        return text
    age = _num(text, "intervention", line)
    if age < 0:
        raise ValidationError(f"line {line}: negative restart age {text!r}")
    return age


def load_panel(path) -> list:
    """Read a panel CSV into a list of :class:`EventHistory`, in order of first appearance."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = list(reader)
    if header[:3] != ["unit_id", "time", "status"]:
        raise ValidationError(f"{path}: header must start with unit_id,time,status")
    xcols = [i for i, c in enumerate(header) if c.startswith("x") and c[1:].isdigit()]
    if [header[i] for i in xcols] != [f"x{j + 1}" for j in range(len(xcols))]:
        raise ValidationError(f"{path}: covariate columns must be x1..xq in order")
    icol = header.index("intervention") if "intervention" in header else None
    known = {0, 1, 2, *xcols} | ({icol} if icol is not None else set())
    extra = [header[i] for i in range(len(header)) if i not in known]
    if extra:
        raise ValidationError(f"{path}: unknown columns {extra}")

    units: dict = {}
    for n, row in enumerate(rows, start=2):
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"line {n}: expected {len(header)} fields, got {len(row)}")
        uid = row[0].strip()
        if uid == "":
            raise ValidationError(f"line {n}: empty unit_id")
        t = _num(row[1], "time", n)
        status = row[2].strip()
        if status not in ("0", "1", "2"):
            raise ValidationError(f"line {n}: status must be 0, 1 or 2, got {status!r}")
        cells = [row[i].strip() for i in xcols]
        if status == "2" and any(c == "" for c in cells):
            raise ValidationError(f"line {n}: covariate-change row needs every covariate")
        blank = [c == "" for c in cells]
        if any(blank) and not all(blank):
            raise ValidationError(f"line {n}: partially blank covariates")
        x = None if any(blank) else tuple(_num(c, "covariate", n) for c in cells)
        mark = _mark(row[icol], n) if icol is not None else None
        if mark is not None and status != "1":
            raise ValidationError(f"line {n}: intervention mark on a non-event row")
        units.setdefault(uid, []).append((t, int(status), x, mark, n))
    return [_assemble(uid, recs, len(xcols), icol is not None) for uid, recs in units.items()]


def _assemble(uid, recs, q, has_marks) -> EventHistory:
    cens = [r for r in recs if r[1] == 0]
    if len(cens) != 1:
        raise ValidationError(f"unit {uid}: expected exactly one censoring row, found {len(cens)}")
    tau = cens[0][0]
    events = sorted((r for r in recs if r[1] == 1), key=lambda r: r[0])
    times = [r[0] for r in events]
    for a, b in zip(times, times[1:]):
        if a == b:
            raise ValidationError(f"unit {uid}: duplicate event time {a}")
    changes = sorted((r for r in recs if r[1] == 2), key=lambda r: r[0])
    if changes:
        if changes[0][0] != 0.0:
            raise ValidationError(f"unit {uid}: first covariate-change row must be at time 0")
        cov = [(r[0], r[2]) for r in changes]
    else:
        filled = {r[2] for r in recs if r[2] is not None}
        if len(filled) > 1:
            raise ValidationError(f"unit {uid}: covariates differ across rows without change markers")
        cov = filled.pop() if filled else None
        if cov is None and q > 0:
            raise ValidationError(f"unit {uid}: covariates missing")
    marks = tuple(r[3] for r in events) if has_marks else None
    if marks is not None and all(m is None for m in marks):
        marks = None
    h = EventHistory(uid, tau, np.asarray(times, dtype=float), cov if q else None, marks)
    if changes:
        for t, status, x, _, line in recs:
            if status != 2 and x is not None and tuple(covariate_at(h, t)) != x:
                raise ValidationError(f"line {line}: covariates disagree with the value in force at {t}")
    return h


def save_panel(path, panel) -> None:
    panel = list(panel)
    q = panel[0].q if panel else 0
    marks = any(h.interventions is not None for h in panel)
    header = ["unit_id", "time", "status"] + [f"x{j + 1}" for j in range(q)] + (["intervention"] if marks else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for h in panel:
            if h.q != q:
                raise ValidationError("units disagree on covariate dimension")
            varying = len(h.covariates) > 1
            if varying:
                for t, v in h.covariates:
                    w.writerow([h.unit_id, fmt(t), 2, *map(fmt, v)] + ([""] if marks else []))
            for j, t in enumerate(h.event_times):
                m = h.interventions[j] if h.interventions is not None else None
                m = "" if m is None else (m if isinstance(m, str) else fmt(m))
                x = covariate_at(h, float(t))
                w.writerow([h.unit_id, fmt(t), 1, *map(fmt, x)] + ([m] if marks else []))
            w.writerow([h.unit_id, fmt(h.tau), 0, *map(fmt, covariate_at(h, h.tau))] + ([""] if marks else []))


def save_stepfunction(path, sf: StepFunction) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["jump_time", "increment", "cumulative"])
        for t, d, c in zip(sf.jump_times, sf.increments, sf.cumulative):
            w.writerow([fmt(t), fmt(d), fmt(c)])


def load_stepfunction(path) -> StepFunction:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["jump_time", "increment", "cumulative"]:
            raise ValidationError(f"{path}: not a step-function file")
        rows = [r for r in reader if r]
    arr = np.array([[float(r[0]), float(r[1])] for r in rows]).reshape(-1, 2)
    return StepFunction(arr[:, 0], arr[:, 1])


def save_survivor(path, curve: SurvivorCurve) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survivor"])
        for t, s in zip(curve.times, curve.values):
            w.writerow([fmt(t), fmt(s)])


def _jsonable(x):
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def spec_to_dict(spec: ModelSpec) -> dict:
    if callable(spec.bbs_p):
        raise ValidationError("a callable bbs probability cannot be serialized")
    return {
        "baseline": spec.baseline,
        "rho": spec.rho_family,
        "link": spec.link,
        "frailty": spec.frailty,
        "age": spec.age_policy,
        "loadshare_k": spec.loadshare_k,
        "bbs_p": spec.bbs_p,
    }


def save_fit(tsv_path, fit, json_path=None) -> None:
    """Write the ``parameter, estimate, se`` table and, optionally, a full JSON report."""
    with Path(tsv_path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["parameter", "estimate", "se"])
        for name, est, se in fit.rows():
            w.writerow([name, fmt(est), fmt(se)])
    if json_path is None:
        return
    p = fit.estimates
    report = {
        "model": spec_to_dict(fit.spec),
        "estimates": {"theta": list(p.theta), "alpha": p.alpha, "beta": list(p.beta), "xi": p.xi},
        "names": list(fit.names),
        "standard_errors": list(np.asarray(fit.standard_errors, dtype=float)),
        "se_method": fit.se_method,
        "se_reliable": fit.se_reliable,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "method": fit.method,
        "extra": fit.extra,
    }
    lam = getattr(fit, "lambda0", None)
    if lam is not None:
        report["lambda0"] = {"jump_times": lam.jump_times, "increments": lam.increments}
    Path(json_path).write_text(json.dumps(_jsonable(report), indent=2) + "\n")


@dataclass
class FitReport:
    spec: ModelSpec
    estimates: Parameters
    names: list
    standard_errors: np.ndarray
    loglik: float
    converged: bool
    method: str
    lambda0: Optional[StepFunction] = None
    extra: dict = field(default_factory=dict)


def load_fit(path) -> FitReport:
    """Read a JSON fit report written by :func:`save_fit`."""
    try:
        d = json.loads(Path(path).read_text())
        spec = model_spec(d["model"])
        e = d["estimates"]
        alpha = e["alpha"]
        alpha = tuple(map(float, alpha)) if isinstance(alpha, list) else float(alpha)
        est = Parameters(tuple(map(float, e["theta"])), alpha, tuple(map(float, e["beta"])), float(e["xi"]))
        lam = None
        if "lambda0" in d:
            lam = StepFunction(list(map(float, d["lambda0"]["jump_times"])), list(map(float, d["lambda0"]["increments"])))
        return FitReport(
            spec, est, list(d["names"]), np.array([float(s) for s in d["standard_errors"]]),
            float(d["loglik"]), bool(d["converged"]), str(d["method"]), lam, dict(d.get("extra", {})),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: malformed fit report ({exc})") from None


# ----------------------------------------------------------------- configs

_MODEL_KEYS = {"baseline", "rho", "link", "frailty", "age", "loadshare_k", "bbs_p"}
_TOP_KEYS = {"n", "seed", "model", "params", "censoring", "covariates", "study", "max_events"}
_PARAM_KEYS = {"theta", "alpha", "beta", "xi"}
_CENS_KEYS = {"type", "tau", "low", "high", "rate", "stop_after"}
_COV_KEYS = {"type", "dists", "rows"}
_STUDY_KEYS = {"reps", "fit", "workers", "level", "fit_model"}
FIT_METHODS = ("mle", "em", "profile", "semiparam-em")


def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise ValidationError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {unknown}")
    return d


def _choice(value, table, what):
    if isinstance(table, dict):
        if value not in table:
            raise ValidationError(f"unknown {what} {value!r}; expected one of {sorted(table)}")
        return table[value]
    if value not in table:
        raise ValidationError(f"unknown {what} {value!r}; expected one of {list(table)}")
    return value


def model_spec(d: dict, base: Optional[ModelSpec] = None) -> ModelSpec:
    """:class:`ModelSpec` from a config ``model`` block; missing keys default to ``base``."""
    _strict(d, _MODEL_KEYS, "model")
    base = base or ModelSpec()
    return ModelSpec(
        baseline=_choice(d.get("baseline", base.baseline), BASELINES, "baseline"),
        rho_family=_choice(d.get("rho", base.rho_family), RHO_ALIASES, "rho family"),
        link=_choice(d.get("link", base.link), LINK_ALIASES, "link"),
        frailty=_choice(d.get("frailty", base.frailty), FRAILTIES, "frailty"),
        age_policy=_choice(d.get("age", base.age_policy), AGE_POLICIES, "age policy"),
        loadshare_k=d.get("loadshare_k", base.loadshare_k),
        bbs_p=d.get("bbs_p", base.bbs_p),
    )


def _xi(value) -> float:
    if value is None or value in ("inf", "Infinity"):
        return float("inf")
    return float(value)


def _int(value, what, lo=0):
    if isinstance(value, bool) or not isinstance(value, int) or value < lo:
        raise ValidationError(f"{what} must be an integer >= {lo}, got {value!r}")
    return value


@dataclass(frozen=True)
class StudySettings:
    reps: int = 100
    fit: str = "mle"
    workers: int = 1
    level: float = 0.95
    fit_spec: Optional[ModelSpec] = None


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig
    study: StudySettings = StudySettings()


def parse_config(d: dict) -> RunConfig:
    _strict(d, _TOP_KEYS, "config")
    if "n" not in d:
        raise ValidationError("config needs n")
    spec = model_spec(d.get("model", {}))
    pd = _strict(d.get("params", {}), _PARAM_KEYS, "params")
    alpha = pd.get("alpha", 1.0)
    params = Parameters(
        tuple(pd.get("theta", (1.0, 1.0))),
        tuple(alpha) if isinstance(alpha, list) else alpha,
        tuple(pd.get("beta", ())),
        _xi(pd.get("xi", "inf")),
    )
    if spec.frailty == "none" and math.isfinite(params.xi):
        raise ValidationError("params.xi is finite but model.frailty is 'none'")
    cd = _strict(d.get("censoring", {"type": "fixed", "tau": 1.0}), _CENS_KEYS, "censoring")
    cens = CensoringSpec(
        kind=cd.get("type", "fixed"),
        tau=float(cd.get("tau", 1.0)),
        low=float(cd.get("low", 0.0)),
        high=float(cd.get("high", 1.0)),
        rate=float(cd.get("rate", 1.0)),
        stop_after=None if cd.get("stop_after") is None else _int(cd["stop_after"], "censoring.stop_after", 1),
    )
    vd = _strict(d.get("covariates", {"type": "none"}), _COV_KEYS, "covariates")
    dists = []
    for item in vd.get("dists", []):
        item = dict(item)
        name = item.pop("dist", None)
        if name is None:
            raise ValidationError("each covariate distribution needs a 'dist' key")
        dists.append((name, {k: float(v) for k, v in item.items()}))
    cov = CovariateGenerator(
        kind=vd.get("type", "none"),
        rows=tuple(tuple(float(x) for x in r) for r in vd.get("rows", ())),
        dists=tuple(dists),
    )
    kw = {}
    if "max_events" in d:
        kw["max_events"] = _int(d["max_events"], "max_events", 1)
    sim = SimConfig(_int(d["n"], "n"), spec, params, cens, cov, _int(d.get("seed", 0), "seed"), **kw)
    sd = _strict(d.get("study", {}), _STUDY_KEYS, "study")
    fit_spec = model_spec(sd["fit_model"], spec) if "fit_model" in sd else None
    study = StudySettings(
        _int(sd.get("reps", 100), "study.reps", 1),
        _choice(sd.get("fit", "mle"), FIT_METHODS, "fit method"),
        _int(sd.get("workers", 1), "study.workers", 1),
        float(sd.get("level", 0.95)),
        fit_spec,
    )
    if not 0 < study.level < 1:
        raise ValidationError("study.level must lie in (0, 1)")
    return RunConfig(sim, study)


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run configuration (unknown keys are rejected)."""
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    try:
        return parse_config(d)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: {exc}") from None
