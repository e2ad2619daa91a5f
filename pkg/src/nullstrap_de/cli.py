"""Command-line entry point: ``nullstrap-de analyze | simulate | null-check``.

Exit codes: 0 success, 2 input or argument error, 3 internal pipeline error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import CovariatesUnsupportedError, Method, run_baseline
from .core import ValidationError, estimate_size_factors, normalize_counts, validate_inputs
from .filter import INFINITE
from .io import file_sha256, fmt, read_counts_tsv, read_metadata_tsv, write_counts_tsv, write_table
from .nbglm import FitStatus, ModeError, StatMode, fit_all_genes
from .pipeline import run_nullstrap
from .simulate import (
    ALL_METHODS,
    BUILTIN,
    SimulationConfig,
    permutation_null_check,
    run_grid,
    setting_grid,
    write_metrics,
    write_null_check,
)

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3

log = logging.getLogger("nullstrap_de")


class InputError(Exception):
    """Bad user input detected after argument parsing; maps to exit code 2."""


# ---------------------------------------------------------------------------
# argument parsing

def _csv_methods(text: str) -> list[Method]:
    try:
        return [Method.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        choices = ",".join(m.value for m in Method)
        raise argparse.ArgumentTypeError(f"unknown method in {text!r}; choose from {choices}") from exc


def _common(p: argparse.ArgumentParser, q_default: float | None) -> None:
    if q_default is not None:
        p.add_argument("--q", type=float, default=q_default, help="target FDR (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads, 0 = all cores (fallback: NULLSTRAP_THREADS, else 1)")
    p.add_argument("--no-adjust", dest="adjust", action="store_false",
                   help="disable the small-sample target adjustment")
    p.add_argument("--stat", choices=[m.value for m in StatMode], default=None,
                   help="statistic mode (default scaled_wald for two conditions, neg_log_p otherwise)")
    p.add_argument("--methods", type=_csv_methods, default=None,
                   help="comma-separated methods: " + ",".join(m.value for m in Method))
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--wilcoxon-blind", action="store_true",
                   help="run Wilcoxon methods ignoring covariates instead of skipping them")
    p.add_argument("--config", default=None, help="flat key=value file; keys mirror flag names")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nullstrap-de",
                                     description="Differential expression with synthetic-null FDR control.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="run the procedure on a count table")
    a.add_argument("counts", help="counts TSV (genes as rows)")
    a.add_argument("metadata", help="metadata TSV with sample_id, condition and covariate columns")
    _common(a, 0.05)
    a.add_argument("--reference", default=None, help="reference condition (default: first in sorted order)")
    a.add_argument("--dump-null", default=None, metavar="PATH", help="write the synthetic null counts")
    a.add_argument("--dump-fdp", default=None, metavar="PATH", help="write the estimated FDP curve")
    a.add_argument("--per-gene-sf-resample", action="store_true", help=argparse.SUPPRESS)

    s = sub.add_parser("simulate", help="run the simulation benchmark grid")
    _common(s, None)
    s.add_argument("--setting", type=int, choices=(1, 2), default=1)
    s.add_argument("--n", type=int, nargs="+", default=None, help="sample sizes (default: setting grid)")
    s.add_argument("--fc", type=float, nargs="+", default=None, help="fold changes")
    s.add_argument("--pi", type=float, nargs="+", default=None, help="DE proportions")
    s.add_argument("--q", type=float, nargs="+", default=None, help="target FDR levels")
    s.add_argument("--reps", type=int, default=50, help="replicates per cell (default 50)")
    s.add_argument("--m", type=int, default=1000, help="genes per dataset (default 1000)")
    s.add_argument("--params", default=None, metavar="TSV",
                   help="two-column (base_mean, dispersion) table to resample gene parameters from")
    s.add_argument("--all-up", action="store_true", help="make every simulated effect an up-regulation")

    c = sub.add_parser("null-check", help="permutation negative control on a two-condition dataset")
    c.add_argument("counts")
    c.add_argument("metadata")
    _common(c, 0.05)
    c.add_argument("--permutations", type=int, default=100)
    c.add_argument("--reference", default=None)
    return parser


def _config_tokens(parser: argparse.ArgumentParser, command: str, path: str) -> list[str]:
    """Translate a key=value file into flag tokens for ``command``."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    flags = {}
    for act in sub._actions:
        for opt in act.option_strings:
            if opt.startswith("--"):
                flags[opt[2:].replace("-", "_")] = (opt, act)
    tokens: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key=value")
            key, val = (t.strip() for t in line.split("=", 1))
            norm = key.lstrip("-").replace("-", "_")
            if norm not in flags or norm == "config":
                raise InputError(f"{path}:{lineno}: unknown key {key!r}")
            opt, act = flags[norm]
            if act.nargs == 0:
                truthy = val.lower() in ("1", "true", "yes", "on")
                if truthy:
                    tokens.append(opt)
                elif val.lower() not in ("0", "false", "no", "off"):
                    raise InputError(f"{path}:{lineno}: {key} expects true/false")
            elif act.nargs == "+":
                tokens += [opt, *val.replace(",", " ").split()]
            else:
                tokens += [opt, val]
    return tokens


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # config values go first so that explicit flags override them
        extra = _config_tokens(parser, args.command, args.config)
        idx = argv.index(args.command) + 1
        args = parser.parse_args(argv[:idx] + extra + argv[idx:])
    return args


# ---------------------------------------------------------------------------
# helpers

def _write_run_json(out: Path, args: argparse.Namespace, inputs: dict, summary: dict) -> None:
    config = {k: (v.value if isinstance(v, Method) else v) for k, v in vars(args).items()}
    if config.get("methods") is not None:
        config["methods"] = [m.value if isinstance(m, Method) else m for m in args.methods]
    record = {
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "config": config,
        "inputs": inputs,
        "summary": summary,
    }
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load(args):
    counts = read_counts_tsv(args.counts)
    design = read_metadata_tsv(args.metadata, counts.sample_ids, args.reference)
    data = validate_inputs(counts, design)
    inputs = {"counts": {"path": args.counts, "sha256": file_sha256(args.counts)},
              "metadata": {"path": args.metadata, "sha256": file_sha256(args.metadata)}}
    return counts, design, data, inputs


def _check_methods(methods, design, blind: bool) -> None:
    for meth in methods:
        if not meth.is_wilcoxon:
            continue
        if design.K != 2:
            raise InputError(f"{meth.value} needs exactly two conditions, found {design.K}")
        if design.p and not blind:
            raise InputError(f"COVARIATES_UNSUPPORTED: {meth.value} cannot adjust for covariates "
                             "(use --wilcoxon-blind to run it ignoring them)")


# ---------------------------------------------------------------------------
# subcommands

REPORT_BASE = ["gene_id", "baseMean"]


def cmd_analyze(args) -> int:
    counts, design, data, inputs = _load(args)
    methods = args.methods or [Method.NULLSTRAP, Method.NBGLM_BH]
    _check_methods(methods, design, args.wilcoxon_blind)
    mode = StatMode(args.stat) if args.stat else StatMode.default_for(design.K)
    if mode is StatMode.SCALED_WALD and design.K != 2:
        raise InputError("scaled_wald needs exactly two conditions")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    s = estimate_size_factors(counts)
    fits = fit_all_genes(counts, design, s, threads=args.threads)
    run = run_nullstrap(counts, design, args.q, args.seed, mode=mode, adjust=args.adjust,
                        size_factors=s, fits=fits, per_gene_resample=args.per_gene_sf_resample,
                        threads=args.threads)
    baseline = {}
    for meth in methods:
        if meth is not Method.NULLSTRAP:
            baseline[meth] = run_baseline(meth, counts, design, s, args.q, fits=fits,
                                          ignore_covariates=args.wilcoxon_blind, threads=args.threads)

    levels = design.level_names[:-1]
    suffix = [""] if design.K == 2 else [f"_{lv}" for lv in levels]
    header = (REPORT_BASE + [f"log2FoldChange{x}" for x in suffix] + [f"beta{x}" for x in suffix]
              + [f"se{x}" for x in suffix] + ["stat_observed", "p_value", "nullstrap_discovery", "status"])
    for meth in baseline:
        header += [f"{meth.value}_p_value", f"{meth.value}_discovery"]

    base_mean = normalize_counts(counts, s).mean(axis=0)
    se = fits.se_beta
    show_nullstrap = Method.NULLSTRAP in methods
    rows = []
    for j, gid in enumerate(counts.gene_ids):
        status = FitStatus.ALL_ZERO if not data.analyzable[j] else fits.status[j]
        fitted = status not in (FitStatus.ALL_ZERO, FitStatus.SINGULAR)
        beta = fits.beta[j] if fitted else np.full(design.K - 1, np.nan)
        sej = se[j] if fitted else np.full(design.K - 1, np.nan)
        row = [gid, base_mean[j], *(beta / math.log(2)), *beta, *sej,
               run.stats.observed[j], run.p_values[j],
               bool(run.result.discovery_mask[j]) if show_nullstrap else None, status.value]
        for res in baseline.values():
            row += [res.p_values[j], bool(res.discovery_mask[j])]
        rows.append(row)
    write_table(out / "report.tsv", header, rows)

    if args.dump_null:
        write_counts_tsv(run.null_counts, args.dump_null)
    if args.dump_fdp:
        curve = run.result.curve
        write_table(args.dump_fdp, ["threshold", "fdp"], zip(curve.candidate_thresholds, curve.fdp_values))

    tau = run.result.tau
    summary = {
        "genes": counts.m,
        "analyzable": int(data.analyzable.sum()),
        "statistic": mode.value,
        "effective_q": run.result.effective_q,
        "tau": "Inf" if tau == INFINITE else tau,
        "nullstrap_discoveries": len(run.result.discoveries) if show_nullstrap else None,
    }
    for meth, res in baseline.items():
        summary[f"{meth.value}_discoveries"] = len(res.discoveries)
    _write_run_json(out, args, inputs, summary)
    if show_nullstrap:
        print(f"{len(run.result.discoveries)} discoveries at q={args.q} "
              f"(effective {fmt(run.result.effective_q)}, tau={fmt(tau)})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    methods = args.methods or list(ALL_METHODS)
    if args.stat:
        log.warning("--stat is ignored by simulate; the default statistic is used")
    try:
        base = SimulationConfig(m=args.m, replicates=args.reps, seed=args.seed,
                                param_source=args.params or BUILTIN, all_up=args.all_up,
                                adjust=args.adjust)
        configs = setting_grid(args.setting, base, n=args.n, fc=args.fc, pi_de=args.pi, q=args.q)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.params and not Path(args.params).is_file():
        raise InputError(f"parameter file {args.params!r} not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    rows = run_grid(configs, methods, threads=args.threads, blind_wilcoxon=args.wilcoxon_blind,
                    progress=progress)
    write_metrics(rows, out / "metrics.tsv")
    inputs = {}
    if args.params:
        inputs["params"] = {"path": args.params, "sha256": file_sha256(args.params)}
    failed = sum(r.status == "FAILED" for r in rows)
    _write_run_json(out, args, inputs, {"cells": len(configs), "rows": len(rows), "failed_rows": failed})
    print(f"wrote {len(rows)} rows for {len(configs)} cell(s) to {out / 'metrics.tsv'}")
    return EXIT_OK


def cmd_null_check(args) -> int:
    counts, design, data, inputs = _load(args)
    if design.K != 2:
        raise InputError(f"null-check needs exactly two conditions, found {design.K}")
    if args.permutations < 0:
        raise InputError("--permutations must be non-negative")
    methods = args.methods or list(ALL_METHODS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = permutation_null_check(counts, design, args.permutations, args.q, methods, args.seed,
                                  adjust=args.adjust, blind_wilcoxon=args.wilcoxon_blind,
                                  threads=args.threads)
    write_null_check(rows, out / "null_check.tsv")
    hist = [(r.method, k, v) for r in rows for k, v in sorted(r.histogram().items())]
    write_table(out / "null_check_hist.tsv", ["method", "discoveries", "permutations"], hist)
    summary = {r.method: {"mean": r.mean_discoveries, "status": r.status} for r in rows}
    _write_run_json(out, args, inputs, summary)
    for r in rows:
        if r.status != "OK":
            print(f"{r.method}: {r.status}")
            continue
        print(f"{r.method}: mean {fmt(r.mean_discoveries)} discoveries over {r.counts.size} permutation(s)")
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "null-check": cmd_null_check}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # argparse: --help / --version exit 0, bad usage exits 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print("input error:", file=sys.stderr)
        for issue in exc.issues:
            print(f"  {issue.code}: {issue.message}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, CovariatesUnsupportedError, ModeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # anything else is a pipeline fault
        log.debug("pipeline failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
