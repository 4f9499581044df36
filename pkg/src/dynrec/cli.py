"""Command-line interface: ``dynrec simulate | fit | mc-study | predict``.

Exit codes: 0 success, 2 validation error, 3 convergence failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, ValidationError
from .io import (
    LINK_ALIASES,
    RHO_ALIASES,
    fmt,
    load_config,
    load_fit,
    load_panel,
    save_fit,
    save_panel,
    save_stepfunction,
    save_survivor,
)
from .model import AGE_POLICIES, BASELINES, FRAILTIES, ModelSpec
from .parametric import em_fit, jackknife_se, mle_fit
from .semiparametric import maximize_profile, semiparam_em_fit
from .simulate import predict_future, simulate_panel
from .study import run_study
from .svgplot import write_step_svg

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("dynrec")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--baseline", choices=BASELINES, default="weibull")
    p.add_argument("--rho", choices=["constant", "geometric", "jm", "loadshare"], default="constant")
    p.add_argument("--link", choices=["unit", "exp"], default="exp")
    p.add_argument("--frailty", choices=FRAILTIES, default="none")
    p.add_argument("--age", choices=AGE_POLICIES, default="minimal")
    p.add_argument("--loadshare-k", type=int, default=None, help="number of components K for --rho loadshare")


def _spec(args) -> ModelSpec:
    return ModelSpec(
        baseline=args.baseline,
        rho_family=RHO_ALIASES[args.rho],
        link=LINK_ALIASES[args.link],
        frailty=args.frailty,
        age_policy=args.age,
        loadshare_k=args.loadshare_k,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynrec", description="Dynamic recurrent-event models: simulate, fit, study, predict.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a panel from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="panel CSV path")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("fit", help="fit a model to a panel CSV")
    p.add_argument("panel")
    p.add_argument("--out", required=True, help="output prefix for .tsv, .json and baseline CSV files")
    _model_flags(p)
    p.add_argument("--method", choices=["auto", "mle", "em"], default="auto",
                   help="parametric frailty fit: marginal MLE (auto) or EM")
    p.add_argument("--s-star", type=float, default=float("inf"), help="analysis time s*")
    p.add_argument("--seed", type=int, default=0, help="seed for the profile-search restarts")
    p.add_argument("--jackknife", action=argparse.BooleanOptionalAction, default=None,
                   help="delete-one-unit jackknife s.e. (default on for the nonparametric baseline)")
    p.add_argument("--plot", action="store_true", help="also write an SVG of the baseline survivor")

    p = sub.add_parser("mc-study", help="Monte Carlo simulate-and-fit study from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="study TSV path")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("predict", help="predict the next event time of one unit")
    p.add_argument("panel")
    p.add_argument("fit", help="JSON fit report written by 'fit'")
    p.add_argument("--unit", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="TSV path (stdout when omitted)")
    return parser


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim = cfg.sim if args.seed is None else replace(cfg.sim, seed=args.seed)
    save_panel(args.out, simulate_panel(sim))
    return EXIT_OK


def _fit(panel, spec: ModelSpec, args):
    jack = args.jackknife if args.jackknife is not None else spec.baseline == "nonparametric"
    if spec.baseline == "nonparametric":
        if spec.frailty == "gamma":
            return semiparam_em_fit(panel, spec, s_star=args.s_star, jackknife=jack, seed=args.seed)
        return maximize_profile(panel, spec, s_star=args.s_star, jackknife=jack, seed=args.seed)
    if spec.frailty == "gamma" and args.method == "em":
        fit = em_fit(panel, spec, s_star=args.s_star)
    else:
        fit = mle_fit(panel, spec, s_star=args.s_star)
    if jack:
        refit = (lambda d, s, init: em_fit(d, s, init=init).estimates) if args.method == "em" else None
        fit.standard_errors = jackknife_se(panel, spec, fit, refit)
        fit.se_method = "jackknife"
    return fit


def cmd_fit(args) -> int:
    spec = _spec(args)
    panel = load_panel(args.panel)
    fit = _fit(panel, spec, args)
    out = args.out
    save_fit(out + ".tsv", fit, out + ".json")
    lam = getattr(fit, "lambda0", None)
    if lam is not None:
        save_stepfunction(out + "_lambda0.csv", lam)
        save_survivor(out + "_survivor.csv", fit.survivor)
        if args.plot:
            write_step_svg(out + "_survivor.svg", [("S0", fit.survivor.times, fit.survivor.values, 1.0)],
                           title="baseline survivor", ylabel="survivor")
    elif args.plot:
        from .hazard import weibull_cumhaz

        theta = fit.estimates.theta
        grid = np.linspace(0.0, max(h.tau for h in panel), 201)[1:]
        write_step_svg(out + "_survivor.svg", [("S0", grid, np.exp(-weibull_cumhaz(grid, *theta)), 1.0)],
                       title="baseline survivor", ylabel="survivor")
    for name, est, se in fit.rows():
        print(f"{name}\t{fmt(est)}\t{fmt(se)}")
    if not fit.converged:
        print("error: fit did not converge", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_mc_study(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, sim=replace(cfg.sim, seed=args.seed))
    res = run_study(cfg, reps=args.reps, workers=args.workers)
    summ = res.summary()
    cols = ["replication", "converged"] + [c for n in res.names for c in (n, f"se_{n}")]
    with Path(args.out).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in range(res.estimates.shape[0]):
            cells = [c for j in range(len(res.names)) for c in (fmt(res.estimates[r, j]), fmt(res.standard_errors[r, j]))]
            w.writerow([r, int(res.converged[r])] + cells)
        rows = [("truth", res.truth)] + [(k, summ[k]) for k in ("mean", "bias", "sd", "mc_se", "mean_se", "coverage")]
        for label, vals in rows:
            w.writerow([label, ""] + [c for v in vals for c in (fmt(v), "")])
    for j, n in enumerate(res.names):
        print(f"{n}\tbias={summ['bias'][j]:.4g}\tmc_se={summ['mc_se'][j]:.4g}\tcoverage={summ['coverage'][j]:.3f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    panel = load_panel(args.panel)
    report = load_fit(args.fit)
    unit = next((h for h in panel if h.unit_id == args.unit), None)
    if unit is None:
        raise ValidationError(f"unit {args.unit!r} not in {args.panel}")
    res = predict_future(unit, report.estimates, report.spec, args.horizon, args.draws, args.seed)
    lines = [
        "quantity\tvalue",
        f"start\t{fmt(res.start)}",
        f"horizon\t{fmt(res.horizon)}",
        f"prob_event\t{fmt(res.prob_event)}",
        f"mean_if_event\t{fmt(res.mean)}",
        f"median\t{fmt(res.median)}",
    ] + [f"q{p:g}\t{fmt(v)}" for p, v in res.quantiles.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "mc-study": cmd_mc_study, "predict": cmd_predict}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
