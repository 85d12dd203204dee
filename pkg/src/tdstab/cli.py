"""Command line entry point: ``tdstab analyze|simulate|sweep|max-gamma``.

Exit codes: 0 on success (a diverging simulation is a result, not a
failure), 2 for configuration errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .chains import ChainError, has_reverse_support, perturbation_factor
from .config import ConfigError, ExperimentConfig, load_json, parse_config
from .simulate import finite_or_none, td0_run
from .stability import (
    SCHEMA_VERSION,
    StabilityReport,
    analyze,
    assemble_A_b,
    corollary1_bound,
    corollary1_limits,
    format_summary,
    lemma1_gamma_bounds,
    max_nd_gamma,
    projected_bellman_error,
    td_fixed_point,
    theorem2_bound,
)

log = logging.getLogger("tdstab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class NumericFailure(RuntimeError):
    pass


def fmt(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".12g")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# -- analyze ----------------------------------------------------------------

def cmd_analyze(cfg: ExperimentConfig, out: Path) -> StabilityReport:
    try:
        report = analyze(cfg.original, cfg.perturbed, cfg.setup(), cfg.tol)
    except (np.linalg.LinAlgError, ChainError) as exc:
        raise NumericFailure(str(exc)) from exc
    summary = format_summary(report)
    _write_json(out / "report.json", report.to_dict())
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return report


# -- sweep ------------------------------------------------------------------

def sweep_rows(delta_grid, rhos) -> tuple[list[str], list[list[float]]]:
    header = ["delta", "thm2", *[f"cor1_rho_{rho:g}" for rho in rhos],
              "cor1_limit_rho_inf", "cor1_limit_rho_0"]
    rows = []
    for delta in delta_grid:
        # ratio perturbation of a constant-ratio walk is delta on every edge
        thm2 = theorem2_bound(max(delta, 1.0 / delta))
        lim_inf, lim_0 = corollary1_limits(delta)
        rows.append([delta, thm2, *[corollary1_bound(rho, delta) for rho in rhos], lim_inf, lim_0])
    return header, rows


def cmd_sweep_bounds(cfg: ExperimentConfig, out: Path) -> Path:
    header, rows = sweep_rows(cfg.delta_grid, cfg.rho)
    path = out / "sweep.csv"
    _write_csv(path, header, rows)
    log.info("wrote %d sweep rows to %s", len(rows), path)
    return path


# -- max-gamma --------------------------------------------------------------

MAX_GAMMA_HEADER = ["name", "rho", "delta", "lemma1_min", "thm2", "cor1", "max_nd_gamma", "gap", "never_nd"]


def max_gamma_row(args) -> list:
    inst, phi, tol = args
    bounds = lemma1_gamma_bounds(inst.original, inst.perturbed)
    thm2 = None
    if has_reverse_support(inst.original) and has_reverse_support(inst.perturbed):
        thm2 = theorem2_bound(perturbation_factor(inst.original, inst.perturbed))
    cor = corollary1_bound(inst.rho, inst.delta) if inst.rho is not None else None
    thr = max_nd_gamma(inst.original, inst.perturbed, phi, tol)
    lem = float(bounds.min())
    return [inst.name, inst.rho, inst.delta, lem, thm2, cor, thr.gamma, thr.gamma - lem,
            "yes" if thr.never_nd else "no"]


def cmd_max_gamma(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[list]:
    rows = _map(max_gamma_row, [(inst, cfg.phi, cfg.tol) for inst in cfg.instances], jobs)
    _write_csv(out / "max_gamma.csv", MAX_GAMMA_HEADER, rows)
    for row in rows:
        sys.stdout.write(f"{row[0]:>28}  lemma1={fmt(row[3])}  thm2={fmt(row[4])}  "
                         f"max_nd={fmt(row[6])}  gap={fmt(row[7])}\n")
    return rows


# -- simulate ---------------------------------------------------------------

def _simulate_one(args):
    cfg, seed, w_star = args
    return td0_run(cfg.original, cfg.perturbed, cfg.setup(), cfg.schedule, cfg.w0, cfg.T,
                   seed, cfg.snapshot_every, start_state=cfg.start_state, w_star=w_star)


def cmd_simulate(cfg: ExperimentConfig, out: Path, seed_offset: int = 0, jobs: int = 1) -> dict:
    setup = cfg.setup()
    A, b = assemble_A_b(cfg.original, cfg.perturbed, setup)
    try:
        w_star = td_fixed_point(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(str(exc)) from exc
    seeds = [s + seed_offset for s in cfg.seeds]
    traces = _map(_simulate_one, [(cfg, s, w_star) for s in seeds], jobs)
    runs = []
    for tr in traces:
        (out / f"trace_seed{tr.seed}.csv").write_text(tr.to_csv(), encoding="utf-8")
        (out / f"trace_seed{tr.seed}.json").write_text(tr.summary_json() + "\n", encoding="utf-8")
        runs.append({"seed": tr.seed, "steps_run": tr.steps_run, "diverged": tr.diverged,
                     "final_distance": finite_or_none(tr.dist_to_wstar[-1]),
                     "final_pbe": finite_or_none(tr.final_pbe)})
    summary = {
        "schema_version": SCHEMA_VERSION,
        "gamma": setup.gamma,
        "T": cfg.T,
        "schedule": cfg.schedule.to_dict(),
        "seeds": seeds,
        "w_star": w_star.tolist(),
        "pbe_at_w_star": projected_bellman_error(w_star, cfg.original, cfg.perturbed, setup),
        "median_final_distance": finite_or_none(statistics.median(float(tr.dist_to_wstar[-1]) for tr in traces)),
        "median_final_pbe": finite_or_none(statistics.median(tr.final_pbe for tr in traces)),
        "divergence_count": sum(r["diverged"] for r in runs),
        "runs": runs,
    }
    _write_json(out / "summary.json", summary)
    sys.stdout.write(f"{len(runs)} runs, {summary['divergence_count']} diverged, "
                     f"median |w_T - w*| = {fmt(summary['median_final_distance'])}\n")
    return summary


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdstab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["analyze", "simulate", "sweep", "max-gamma"])
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--seed-offset", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("TDSTAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def run(args: argparse.Namespace) -> int:
    try:
        cfg = parse_config(load_json(args.config), args.config)
        if cfg.mode != args.command:
            raise ConfigError(f"config.mode: is {cfg.mode!r} but command is {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "analyze":
            cmd_analyze(cfg, out)
        elif args.command == "sweep":
            cmd_sweep_bounds(cfg, out)
        elif args.command == "max-gamma":
            cmd_max_gamma(cfg, out, args.jobs)
        else:
            cmd_simulate(cfg, out, args.seed_offset, args.jobs)
    except (NumericFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    _configure_logging()
    return run(build_parser().parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
