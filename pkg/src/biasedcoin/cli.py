"""Command-line front end: ``biasedcoin {simulate,exact,compare,admissibility}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, ConvergenceError, ParameterError, StateError
from .reports import (
    admissibility_report,
    compare_report,
    exact_report,
    read_report,
    simulate_report,
)
from .simulate import DEFAULT_MARKS, StudyConfig, run_study

log = logging.getLogger("biasedcoin")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# study fields shared by every simulating command, with their defaults
_STUDY_DEFAULTS = {
    "n_max": 200,
    "n_sim": 100_000,
    "seed": 20140201,
    "covariates": "none",
    "bias_estimator": "expectation",
}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biasedcoin", description="Loss and selection bias of sequential randomization rules.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim=True):
        p.add_argument("--config", help="JSON config file or a previously emitted report")
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        if sim:
            p.add_argument("--n", dest="n_max", type=int, help="largest sample size (default 200)")
            p.add_argument("--nsim", dest="n_sim", type=int, help="number of replicates (default 100000)")
            p.add_argument("--nsim-ci", dest="n_sim_ci", type=int, metavar="N", help="reduced replicate count for quick checks")
            p.add_argument("--seed", type=int)
            p.add_argument("--covariates", help="'none' or 'normal:m=4'")
            p.add_argument("--bias-estimator", choices=("expectation", "counting"))
            p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("simulate", help="per-n loss and bias for one rule")
    p.add_argument("--rule")
    common(p)

    p = sub.add_parser("exact", help="steady-state or asymptotic loss and bias")
    p.add_argument("--rule", action="append", dest="rules")
    p.add_argument("--rules", nargs="+", dest="rules_extra")
    p.add_argument("--n", dest="ns", type=_int_list, help="sample sizes (default 199,200)")
    p.add_argument("--method", choices=("auto", "chain", "closed", "approx", "asymptotic"))
    common(p, sim=False)

    p = sub.add_parser("compare", help="one summary row per rule, sorted by adjacent bias")
    p.add_argument("--rules", nargs="+")
    p.add_argument("--extra-n", type=_int_list, help="additional sample sizes to report, e.g. 50")
    common(p)

    p = sub.add_parser("admissibility", help="adjacent-averaged bias and loss at marked n")
    p.add_argument("--rules", nargs="+")
    p.add_argument("--marks", type=_int_list, help="marks (default 15,25,50,200)")
    common(p)
    return parser


def _load_config(path: str | None, command: str) -> dict:
    if not path:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        meta, _ = read_report(text)
    except (json.JSONDecodeError, ConfigError) as exc:
        raise UsageError(f"{path}: not a JSON config or emitted report ({exc})") from exc
    if "config" in meta and isinstance(meta["config"], dict):
        if meta.get("command", command) != command:
            raise UsageError(f"{path} was produced by '{meta['command']}', not '{command}'")
        return dict(meta["config"])
    return dict(meta)


def _pick(args, cfg: dict, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    return cfg.get(key, default)


def _study_fields(args, cfg: dict) -> dict:
    out = {k: _pick(args, cfg, k, d) for k, d in _STUDY_DEFAULTS.items()}
    if getattr(args, "n_sim_ci", None) is not None:
        if args.n_sim is not None:
            raise UsageError("give either --nsim or --nsim-ci")
        out["n_sim"] = args.n_sim_ci
    return out


def _rules_from(args, cfg: dict) -> list[str]:
    rules = list(getattr(args, "rules", None) or []) + list(getattr(args, "rules_extra", None) or [])
    if not rules:
        rules = list(cfg.get("rules", []))
    if not rules and cfg.get("rule"):
        rules = [cfg["rule"]]
    if not rules:
        raise UsageError("no rules given (use --rules)")
    return rules


def _run(args) -> tuple:
    cfg = _load_config(args.config, args.command)
    meta = {}
    if args.command == "exact":
        rules = _rules_from(args, cfg)
        ns = args.ns or cfg.get("n") or [199, 200]
        method = args.method or cfg.get("method", "auto")
        return exact_report(rules, ns, method), meta
    study = _study_fields(args, cfg)
    if getattr(args, "n_sim_ci", None) is not None:
        meta["reduced_mode"] = True
    workers = max(1, args.workers)
    if args.command == "simulate":
        rule = args.rule or cfg.get("rule")
        if not rule:
            raise UsageError("simulate needs --rule")
        config = StudyConfig(rule=rule, **study)
        return simulate_report(run_study(config, workers=workers), meta), meta
    rules = _rules_from(args, cfg)
    configs = [StudyConfig(rule=r, **study) for r in rules]
    if args.command == "compare":
        extra = args.extra_n if args.extra_n is not None else cfg.get("extra_n", [])
        # rejects mixed covariate settings before any simulation is run
        if len({c.m > 0 for c in configs}) > 1:
            raise ConfigError("cannot mix rules with and without covariates in one comparison")
        results = [run_study(c, workers=workers) for c in configs]
        return compare_report(results, extra, meta), meta
    marks = args.marks or cfg.get("marks") or [k for k in DEFAULT_MARKS if k <= study["n_max"]]
    for k in marks:
        if not 2 <= k <= study["n_max"]:
            raise UsageError(f"mark {k} outside 2..{study['n_max']}")
    results = [run_study(c, workers=workers) for c in configs]
    return admissibility_report(results, marks, metadata=meta), meta


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        report, _ = _run(args)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"biasedcoin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, StateError, ArithmeticError) as exc:
        print(f"biasedcoin: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    text = report.render(args.format)
    if args.out:
        Path(args.out).write_text(text)
        log.info("wrote %d rows to %s", len(report.rows), args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
