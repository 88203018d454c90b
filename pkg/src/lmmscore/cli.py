"""Command-line front end: ``lmmscore fit|test|plot|simulate``.

Text reports go to stdout, warnings to stderr. Machine-readable output is
JSON lines with stable field names, written to ``--out`` when given.

Exit codes: 0 success, 1 usage error, 2 data validation, 3 non-convergence,
4 boundary refusal.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import INTERCEPT, DataValidationError, Dataset, FittedModel, validate_dataset
from .estimator import fit_ml
from .instability import (
    ALL_KINDS,
    ORDINAL_KINDS,
    InstabilityError,
    TestOptions,
    compute_statistic,
    fluctuation_process,
    resolve_subset,
)
from .likelihood import fixed_effect_covariance
from .scores import BoundaryError
from .simulation import ScenarioError, emit_power_artifacts, load_study_config, run_power_study
from .svg import Panel, Series, write_svg

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOT_CONVERGED, EXIT_BOUNDARY = 0, 1, 2, 3, 4
TIE_WARN_FRACTION = 0.2
DEFAULT_STATS = {"continuous": ("dm", "cvm", "maxlm"), "ordinal": ("maxlm_o", "wdm_o"), "nominal": ("lm_uo",)}


class UsageError(Exception):
    pass


def _columns(text: str | None) -> list[str]:
    return [c.strip() for c in (text or "").split(",") if c.strip()]


def read_csv(path: str | Path) -> dict[str, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        cols: dict[str, list[str]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataValidationError(
                    f"row {lineno}: expected {len(header)} fields, found {len(row)}")
            for h, v in zip(header, row):
                cols[h].append(v.strip())
    return cols


def load_data(args: argparse.Namespace, with_aux: bool = False) -> Dataset:
    for flag in ("data", "response", "cluster"):
        if not getattr(args, flag):
            raise UsageError(f"--{flag} is required")
    if with_aux and not args.aux:
        raise UsageError("--aux is required")
    fixed = _columns(args.fixed) or [INTERCEPT]
    random = _columns(args.random) or [INTERCEPT]
    raw = read_csv(args.data)
    return validate_dataset(raw, args.response, fixed, random, args.cluster,
                            aux=args.aux if with_aux else None, diagonal=args.diagonal)


def _display_names(data: Dataset) -> list[str]:
    """Canonical names with the source column in brackets for fixed effects."""
    out = []
    for name in data.param_names:
        if name.startswith("beta"):
            out.append(f"{name} [{data.x_columns[int(name[4:])]}]")
        else:
            out.append(name)
    return out


def _write_records(out: str | None, filename: str, records: Sequence[dict[str, Any]]) -> None:
    if not out:
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / filename, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def fit_record(fit: FittedModel, data: Dataset) -> dict[str, Any]:
    se: list[float | None]
    try:
        se = [float(v) for v in np.sqrt(np.diag(fixed_effect_covariance(fit, data)))]
    except np.linalg.LinAlgError:
        se = [None] * data.p
    return {
        "record": "fit",
        "params": dict(zip(data.param_names, (float(v) for v in fit.xi))),
        "se_beta": dict(zip(data.param_names[:data.p], se)),
        "loglik": float(fit.loglik),
        "converged": fit.converged,
        "boundary": fit.boundary,
        "boundary_reason": fit.boundary_reason,
        "n_iter": fit.n_iter,
        "grad_norm": fit.grad_norm,
        "N": data.N,
        "J": data.J,
    }


def cmd_fit(args: argparse.Namespace) -> int:
    data = load_data(args)
    fit = fit_ml(data)
    rec = fit_record(fit, data)
    print(f"N={data.N} J={data.J} p={data.p} K={data.K}")
    for name, value in zip(_display_names(data), fit.xi):
        key = name.split(" ")[0]
        se = rec["se_beta"].get(key)
        extra = f"  se={se:.6g}" if se is not None else ""
        print(f"  {name:<24} {value:14.6g}{extra}")
    print(f"loglik={fit.loglik:.6f} converged={fit.converged} iterations={fit.n_iter} "
          f"max|score|={fit.grad_norm:.3g}")
    if fit.boundary:
        print(f"boundary estimate: {fit.boundary_reason}")
    _write_records(args.out, "fit.jsonl", [rec])
    if not fit.converged:
        print(f"error: optimizer did not converge ({fit.message})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _options(args: argparse.Namespace) -> TestOptions:
    trim = (0.1, 0.9)
    if args.trim:
        parts = _columns(args.trim)
        if len(parts) != 2:
            raise UsageError("--trim takes two comma-separated fractions, e.g. 0.1,0.9")
        trim = (float(parts[0]), float(parts[1]))
    return TestOptions(mc_reps=args.mc_reps, seed=args.seed, trim=trim)


def _tested_fit(args: argparse.Namespace):
    data = load_data(args, with_aux=True)
    fit = fit_ml(data)
    if not fit.converged:
        raise NotConverged(fit)
    return data, fit


class NotConverged(Exception):
    def __init__(self, fit: FittedModel) -> None:
        super().__init__(f"fit did not converge (max|score|={fit.grad_norm:.3g}): {fit.message}")


def _warn_ties(proc, scale: str) -> None:
    if scale == "continuous" and proc.tied_fraction > TIE_WARN_FRACTION:
        print(f"warning: {proc.tied_fraction:.0%} of clusters share a tied aux value; "
              "statistics are evaluated at tie-block ends only", file=sys.stderr)


def cmd_test(args: argparse.Namespace) -> int:
    scale = args.aux_scale
    kinds = _columns(args.stat) or list(DEFAULT_STATS[scale])
    for k in kinds:
        if k not in ALL_KINDS:
            raise UsageError(f"unknown statistic {k!r}; choose from {', '.join(ALL_KINDS)}")
    opts = _options(args)
    data, fit = _tested_fit(args)
    proc = fluctuation_process(fit, data, scale=scale)
    _warn_ties(proc, scale)
    subset = resolve_subset(_columns(args.params) or None, data.param_names)
    records = [fit_record(fit, data)]
    print(f"aux={args.aux} scale={scale} J={data.J} levels={proc.m if scale != 'continuous' else '-'}")
    print("joint test of " + ", ".join(data.param_names[i] for i in subset))
    for kind in kinds:
        res = compute_statistic(proc.select(subset), kind, opts)
        print("  " + res.to_line())
        records.append({"record": "test", "scope": "joint", **res.to_record()})
    print("per-parameter tests (* = unstable at alpha=%.2f)" % opts.alpha)
    print("  " + f"{'parameter':<12}" + "".join(f"{k:>22}" for k in kinds))
    for i in subset:
        cells = []
        for kind in kinds:
            res = compute_statistic(proc.select([i]), kind, opts)
            cells.append(f"{res.value:10.4f} p={res.p_value:.3f}{'*' if res.reject else ' '}")
            records.append({"record": "test", "scope": "parameter", **res.to_record()})
        print("  " + f"{data.param_names[i]:<12}" + "".join(f"{c:>22}" for c in cells))
        if scale == "ordinal" and any(k in ORDINAL_KINDS for k in kinds):
            res = compute_statistic(proc.select([i]), "maxlm_o" if "maxlm_o" in kinds else "wdm_o", opts)
            contrib = ", ".join(f"{v:.3f}" for v in res.contributions[:, 0])
            print(f"  {'':<12}boundary terms ({res.kind}, levels 1..{proc.m - 1}): {contrib}")
    _write_records(args.out, "test.jsonl", records)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    if not args.out:
        raise UsageError("--out is required for plot")
    opts = _options(args)
    data, fit = _tested_fit(args)
    proc = fluctuation_process(fit, data, scale="ordinal")
    subset = resolve_subset(_columns(args.params) or None, data.param_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panels, rows = plot_panels(proc, subset, opts)
    write_svg(out / "fluctuation.svg", panels, ncols=2, title=f"instability across {args.aux}",
              metadata={"version": __version__, "seed": opts.seed, "mc_reps": opts.mc_reps})
    with open(out / "fluctuation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "statistic", "level", "value", "critical_value"])
        w.writerows(rows)
    proc.to_csv(out / "process.csv")
    print(f"wrote {len(panels)} panels to {out / 'fluctuation.svg'}")
    return EXIT_OK


def plot_panels(proc, subset: Sequence[int], opts: TestOptions) -> tuple[list[Panel], list[list[Any]]]:
    """Two panels per tested parameter: ``maxlm_o`` and ``wdm_o`` terms by level.

    The final level is drawn at zero; the dashed line is the 5% critical value
    of the one-parameter statistic.
    """
    levels = list(range(1, proc.m + 1))
    panels, rows = [], []
    for i in subset:
        one = proc.select([i])
        for kind in ("maxlm_o", "wdm_o"):
            res = compute_statistic(one, kind, opts)
            values = [float(v) for v in res.contributions[:, 0]] + [0.0]
            crit = res.critical_value
            top = max(max(values), crit) * 1.1
            panels.append(Panel(f"{proc.names[i]} {kind}", [
                Series(kind, levels, values, color="#1f77b4"),
                Series("5% critical value", [levels[0], levels[-1]], [crit, crit], dashed=True, color="#d62728"),
            ], y_range=(0.0, top)))
            rows.extend([proc.names[i], kind, lv, f"{v:.10g}", f"{crit:.10g}"] for lv, v in zip(levels, values))
    return panels, rows


def cmd_simulate(args: argparse.Namespace) -> int:
    if not args.config:
        raise UsageError("--config is required for simulate")
    if not args.out:
        raise UsageError("--out is required for simulate")
    cfg = load_study_config(args.config)
    if args.seed_given:
        cfg = replace(cfg, seed=args.seed)
    if args.reps:
        cfg = replace(cfg, reps=args.reps)
    mc = args.mc_reps if args.mc_reps_given else cfg.mc_reps
    scenarios, skipped = cfg.partition()
    for msg in skipped:
        print(f"warning: skipped {msg}", file=sys.stderr)
    table = run_power_study(scenarios, cfg.statistics, cfg.tested, TestOptions(mc_reps=mc, seed=cfg.seed),
                            workers=args.workers)
    paths = emit_power_artifacts(table, args.out, seed=cfg.seed)
    for (key, n, d), failed in sorted(table.failures.items()):
        if failed:
            print(f"warning: {key} n={n} d={d:g}: {failed} replicates dropped", file=sys.stderr)
    print(f"{len(table.rows)} power cells; wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmmscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p: argparse.ArgumentParser, aux: bool) -> None:
        p.add_argument("--data", help="input CSV with a header row")
        p.add_argument("--response", help="response column")
        p.add_argument("--fixed", help="comma-separated fixed-effect columns; '1' is the intercept")
        p.add_argument("--random", help="comma-separated random-effect columns; '1' is the intercept")
        p.add_argument("--cluster", help="cluster id column")
        p.add_argument("--diagonal", action="store_true", help="diagonal random-effect covariance")
        p.add_argument("--out", help="output directory for machine-readable records and plots")
        if aux:
            p.add_argument("--aux", help="cluster-level auxiliary column")
            p.add_argument("--params", help="comma-separated parameter names or indices to test")

    def mc_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--mc-reps", type=int, default=25_000, help="Monte Carlo replications")
        p.add_argument("--seed", type=int, default=0, help="Monte Carlo seed")
        p.add_argument("--trim", help="maxlm trimming fractions, e.g. 0.1,0.9")

    p_fit = sub.add_parser("fit", help="fit the model by maximum likelihood")
    data_flags(p_fit, aux=False)
    p_fit.set_defaults(func=cmd_fit)

    p_test = sub.add_parser("test", help="score-based instability tests")
    data_flags(p_test, aux=True)
    p_test.add_argument("--aux-scale", choices=("continuous", "ordinal", "nominal"), default="ordinal")
    p_test.add_argument("--stat", help="comma-separated statistics: " + ", ".join(ALL_KINDS))
    mc_flags(p_test)
    p_test.set_defaults(func=cmd_test)

    p_plot = sub.add_parser("plot", help="fluctuation plots over ordinal aux levels")
    data_flags(p_plot, aux=True)
    mc_flags(p_plot)
    p_plot.set_defaults(func=cmd_plot)

    p_sim = sub.add_parser("simulate", help="run a power study from a config file")
    p_sim.add_argument("--config", help="INI file with a [study] section")
    p_sim.add_argument("--out", help="output directory")
    p_sim.add_argument("--reps", type=int, help="override replications per cell")
    p_sim.add_argument("--workers", type=int, default=1)
    mc_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    args.seed_given = "--seed" in argv
    args.mc_reps_given = "--mc-reps" in argv
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InstabilityError, ScenarioError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except BoundaryError as exc:
        print(f"refused: {exc}. Information-based tests are invalid when a variance is at zero "
              "or a correlation at +/-1; simplify the random-effect structure (e.g. --diagonal).",
              file=sys.stderr)
        return EXIT_BOUNDARY


if __name__ == "__main__":
    sys.exit(main())
