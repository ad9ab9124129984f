"""Command-line interface: ``ordsum analyze | simulate | scenarios | true-values``."""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import CsvSchema, LabelError, SchemaError, read_trial_csv
from .estimators import OrdinalEffectEstimator
from .measures import MEASURE_KINDS, RATIO_KINDS
from .simulate import SimConfig, builtin_scenarios, get_scenario, load_scenarios, run_study, true_values

SCHEMA_VERSION = "ordsum-report/1"
OUTPUT_ENV = "ORDSUM_OUTPUT_DIR"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_LABELS = 4
EXIT_DIAGNOSTICS = 5
EXIT_UNKNOWN_NAME = 6

WEIGHT_CHOICES = ("control", "clayton", "sum", "cumulative", "uniform")
_EFFECT_NAMES = {"log_or": "OR", "rd": "RD", "log_rr_plus": "RRplus", "log_rr_minus": "RRminus"}


def _output_dir(arg):
    out = Path(arg or os.environ.get(OUTPUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(value, ratio):
    return f"{value:.3g}" if ratio else f"{value:.4f}"


def _split(text):
    return tuple(v.strip() for v in text.split(",") if v.strip()) if text else ()


def cmd_analyze(args):
    schema = CsvSchema(
        outcome=args.outcome,
        arm=args.arm,
        control_label=args.control_label,
        covariates=_split(args.covariates),
        levels=_split(args.levels) or None,
    )
    try:
        dataset, labels = read_trial_csv(args.input, schema)
    except LabelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LABELS
    except (SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    measures = _split(args.measures) or ("wOR", "AOR")
    bad = [m for m in measures if m not in MEASURE_KINDS]
    if bad:
        print(f"error: unknown measures {bad}; choose from {MEASURE_KINDS}", file=sys.stderr)
        return EXIT_UNKNOWN_NAME

    est = OrdinalEffectEstimator(
        family=args.family.upper(),
        weight_kind=args.weights,
        measures=measures,
        n_levels=dataset.n_levels,
        prior_sd_beta=args.prior_sd_beta,
        prior_sd_tau=args.prior_sd_tau,
        prior_sd_gamma=args.prior_sd_gamma,
        chains=args.chains,
        warmup=args.warmup,
        draws_per_chain=args.draws,
        random_state=args.seed,
    )
    est.fit(dataset.X, dataset.y, dataset.treated)
    marg = est.marginals_
    bp = est.breakpoints_
    breakpoints = []
    for k in range(dataset.n_levels - 1):
        row = {"breakpoint": k + 1}
        for name, label in _EFFECT_NAMES.items():
            mid, lo, hi = (float(a[k]) for a in bp[name])
            row[label] = {"scale": "difference" if name == "rd" else "log", "point": mid, "lower": lo, "upper": hi}
        breakpoints.append(row)

    report = {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "seed": args.seed,
        "config": {
            "input": str(args.input),
            "family": args.family.upper(),
            "outcome": args.outcome,
            "arm": args.arm,
            "control_label": args.control_label,
            "treatment_label": labels["treatment"],
            "levels": labels["levels"],
            "covariates": list(schema.covariates),
            "weights": args.weights,
            "measures": list(measures),
            "model": est.model_.config.to_dict(),
            "sampler": est.draws_.config.to_dict(),
        },
        "n": {"control": int((~dataset.treated).sum()), "treatment": int(dataset.treated.sum())},
        "adjusted": bool(schema.covariates),
        "measures": est.summary_frame(),
        "breakpoints": breakpoints,
        "weights_posterior_mean": [float(w) for w in est.weights_],
        "diagnostics": est.diagnostics_,
        "truncation": {
            "count": int(marg.truncation_count),
            "fraction": float(marg.truncation_fraction()),
            "warning": marg.truncation_warning(),
        },
    }
    out = _output_dir(args.output_dir)
    stem = args.name or Path(args.input).stem
    json_path = out / f"{stem}_report.json"
    json_path.write_text(json.dumps(report, indent=2) + "\n")
    csv_path = out / f"{stem}_effects.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "name", "breakpoint", "scale", "point", "lower", "upper"])
        for k in range(dataset.n_levels - 1):
            for name, label in _EFFECT_NAMES.items():
                mid, lo, hi = (float(a[k]) for a in bp[name])
                writer.writerow(["breakpoint", label, k + 1, "difference" if name == "rd" else "log",
                                 repr(mid), repr(lo), repr(hi)])
        for s in est.summary_.values():
            writer.writerow(["summary", s.kind, "", "log" if s.is_ratio else "difference",
                             repr(s.log_point), repr(s.log_lower), repr(s.log_upper)])

    for s in est.summary_.values():
        lo, hi = s.interval
        ratio = s.kind in RATIO_KINDS
        flag = " *" if s.significant else ""
        print(f"{s.kind:9s} {_fmt(s.point, ratio)} ({_fmt(lo, ratio)}, {_fmt(hi, ratio)}){flag}")
    print(f"report: {json_path}")
    if not est.diagnostics_["passed"]:
        print("warning: sampler diagnostics failed (R-hat or ESS thresholds)", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    return EXIT_OK


def _resolve_scenarios(names, extra):
    if not names:
        return list(extra) or builtin_scenarios()
    return [get_scenario(n, extra) for n in names]


def cmd_simulate(args):
    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    extra = load_scenarios(config.pop("scenario_file")) if "scenario_file" in config else []
    names = config.pop("scenarios", None)
    for key, flag in (("seed", args.seed), ("chains", args.chains), ("warmup", args.warmup),
                      ("draws_per_chain", args.draws), ("prior_sd_tau", args.prior_sd_tau)):
        if flag is not None:
            config[key] = flag
    try:
        scenarios = _resolve_scenarios(names, extra)
        cfg = SimConfig(**config)
    except (KeyError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_NAME

    def progress(name, done, total):
        if not args.quiet:
            print(f"{name}: {done}/{total}", file=sys.stderr)

    table = run_study(scenarios, cfg, progress)
    out = _output_dir(args.output_dir)
    stem = args.name or Path(args.config).stem
    table.to_csv(out / f"{stem}_power.csv")
    table.to_json(out / f"{stem}_power.json")
    for r in table.rows:
        print(f"{r.scenario:18s} {r.method:15s} {r.rate:.3f} (MC SE {r.mc_se:.3f}, R={r.replicates}, failed={r.failures})")
    return EXIT_OK


def cmd_scenarios(args):
    extra = load_scenarios(args.file) if args.file else []
    for sc in list(extra) + builtin_scenarios():
        tv = true_values(sc, with_po=args.po)
        cols = [f"{k}={np.exp(tv[k]):.3g}" if k not in ("wRD", "ARD", "NB") else f"{k}={tv[k]:.3f}"
                for k in (["PO"] if args.po else []) + ["wOR", "AOR", "wRD", "NB"]]
        fmt = lambda p: "(" + ", ".join(f"{v:.4g}" for v in p) + ")"
        print(f"{sc.name:18s} control={fmt(sc.control)} treatment={fmt(sc.treatment)}")
        print(f"{'':18s} " + " ".join(cols) + f"  (log wOR={tv['wOR']:.2f})")
    return EXIT_OK


def cmd_true_values(args):
    extra = load_scenarios(args.file) if args.file else []
    try:
        scenarios = _resolve_scenarios(args.scenario, extra)
    except KeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_NAME
    payload = {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "scale": "log for ratio measures",
        "scenarios": {sc.name: {"spec": sc.to_dict(), "true_values": true_values(sc)} for sc in scenarios},
    }
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ordsum", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def sampler_flags(sp, defaults):
        sp.add_argument("--seed", type=int, default=defaults.get("seed"))
        sp.add_argument("--chains", type=int, default=defaults.get("chains"))
        sp.add_argument("--warmup", type=int, default=defaults.get("warmup"))
        sp.add_argument("--draws", type=int, default=defaults.get("draws"), help="kept draws per chain")
        sp.add_argument("--prior-sd-tau", type=float, default=defaults.get("prior_sd_tau"),
                        help="prior sd of the PPO offsets (2.5 is the sensitivity value)")
        sp.add_argument("--output-dir", default=None, help=f"defaults to ${OUTPUT_ENV} or the working directory")
        sp.add_argument("--name", default=None, help="stem of the output files")

    a = sub.add_parser("analyze", help="fit a trial dataset and report summary measures")
    a.add_argument("input", help="CSV with a header row")
    a.add_argument("--outcome", default="y")
    a.add_argument("--arm", default="arm")
    a.add_argument("--control-label", default="control")
    a.add_argument("--covariates", default="", help="comma-separated numeric columns")
    a.add_argument("--levels", default="", help="comma-separated outcome labels, best to worst")
    a.add_argument("--family", choices=("po", "ppo", "PO", "PPO"), default="ppo")
    a.add_argument("--weights", choices=WEIGHT_CHOICES, default="control")
    a.add_argument("--measures", default="wOR,AOR", help=f"comma-separated from {', '.join(MEASURE_KINDS)}")
    a.add_argument("--prior-sd-beta", type=float, default=100.0)
    a.add_argument("--prior-sd-gamma", type=float, default=100.0)
    sampler_flags(a, {"seed": 1, "chains": 4, "warmup": 1000, "draws": 1000, "prior_sd_tau": 100.0})
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a power simulation from a JSON config")
    s.add_argument("config", help="JSON with scenarios, methods, replicates, n, seed, ...")
    s.add_argument("--quiet", action="store_true")
    sampler_flags(s, {})
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("scenarios", help="list built-in scenarios with true values")
    c.add_argument("--file", default=None, help="extra scenario file (JSON or CSV)")
    c.add_argument("--po", action="store_true", help="also fit the PO true value")
    c.set_defaults(func=cmd_scenarios)

    t = sub.add_parser("true-values", help="print true values as JSON")
    t.add_argument("scenario", nargs="*", help="scenario names (default: all)")
    t.add_argument("--file", default=None)
    t.set_defaults(func=cmd_true_values)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
