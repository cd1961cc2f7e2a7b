"""Scenario runner and exporter.

Subcommands: ``validate`` a config file, ``solve`` one economy, run the 2x4
redistribution-by-exchange ``matrix``, ``simulate`` a finite population under
a solved policy, and ``bench`` the analytic uncontrolled benchmark.  Exit
codes: 0 success, 2 validation failure, 3 solver non-convergence.

All outputs are deterministic for fixed inputs and seeds: no timestamps,
sorted JSON keys, fixed float formatting in CSV (welfare measures at 4
decimals, everything else shortest round-trip).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import scenarios
from .equilibrium import (
    SolveReport,
    SolverSettings,
    TRACE_FIELDS,
    solve_sne,
)
from .mean_field import OUTCOME_GP, OUTCOME_OUT, OUTCOME_PR, SocialState, compute_field
from .model import (
    EconomyConfig,
    ExchangeMatrix,
    RedistributionRule,
    StateSpace,
    build_state_space,
    config_from_dict,
    config_to_dict,
    load_config,
    validate_config,
)
from .montecarlo import run_simulation
from .welfare import BenchmarkPayoffs, WelfareReport, benchmark_payoffs, welfare_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NO_CONVERGENCE = 3

OUTCOME_NAMES = {OUTCOME_PR: "priority", OUTCOME_GP: "general_purpose", OUTCOME_OUT: "out"}

WELFARE_COLUMNS = (
    "payoff_endogenous",
    "welfare_endogenous",
    "payoff_exogenous",
    "welfare_exogenous",
)


@dataclass(eq=False)
class ScenarioMatrix:
    """A base two-resource economy crossed with design cells."""

    base: EconomyConfig
    cells: list[tuple[RedistributionRule, str]]
    settings: SolverSettings = dataclass_field(default_factory=SolverSettings)
    workers: int = 1

    def cell_config(self, rule: RedistributionRule, regime: str) -> EconomyConfig:
        if regime not in scenarios.EXCHANGE_REGIMES:
            raise ValueError(f"unknown exchange regime {regime!r}")
        if self.base.n_resources != 2:
            raise ValueError("the design matrix needs a two-resource base config")
        chi_hp, chi_ph = scenarios.EXCHANGE_REGIMES[regime]
        data = config_to_dict(self.base)
        data["redistribution"] = rule.value
        data["exchange"] = [[1.0, chi_hp], [chi_ph, 1.0]]
        return config_from_dict(data)


@dataclass(eq=False)
class CellResult:
    """One solved design cell (or its failure record)."""

    key: str
    label: str
    redistribution: str
    exchange: str
    converged: bool
    iterations: int
    residuals: dict
    welfare: WelfareReport | None
    utilization: list
    trace: list
    error: str | None = None
    report: SolveReport | None = None  # in-memory only, not exported


@dataclass(eq=False)
class MatrixBundle:
    benchmark: BenchmarkPayoffs
    cells: list[CellResult]


def utilization_breakdown(
    space: StateSpace, social: SocialState, field=None
) -> list[dict]:
    """Stationary outcome shares per (resource, type, urgency), normalised so
    the masses at each resource sum to 1 across types, urgencies, outcomes."""
    if field is None:
        field = compute_field(space, social)
    cfg = space.cfg
    rows = []
    for r in range(space.n_resources):
        psi = field.outcome_probs[r]  # (3, n_bc)
        for t in range(cfg.n_types):
            w = np.einsum(
                "uk,ukc->uc", social.dist[t, r], social.policy[t, r]
            )  # (n_u, n_bc)
            per_outcome = w @ psi.T * cfg.types[t].share  # (n_u, 3)
            for u in range(space.n_urgencies):
                for o in (OUTCOME_PR, OUTCOME_GP, OUTCOME_OUT):
                    rows.append(
                        {
                            "resource": cfg.resources[r].name,
                            "type": cfg.types[t].name,
                            "urgency": float(space.urgency_values[u]),
                            "outcome": OUTCOME_NAMES[o],
                            "mass": float(per_outcome[u, o]),
                        }
                    )
    return rows


def _cell_key(rule: RedistributionRule, regime: str) -> str:
    return f"{rule.value}__{regime}"


def _solve_cell(args: tuple) -> CellResult:
    cfg, settings, rule, regime = args
    key = _cell_key(rule, regime)
    label = scenarios.cell_label(rule, regime)
    report_check = validate_config(cfg)
    if not report_check.ok:
        return CellResult(
            key=key,
            label=label,
            redistribution=rule.value,
            exchange=regime,
            converged=False,
            iterations=0,
            residuals={},
            welfare=None,
            utilization=[],
            trace=[],
            error=str(report_check),
        )
    try:
        space = build_state_space(cfg)
        report = solve_sne(cfg, settings=settings, space=space)
        wreport = welfare_report(space, report.social, report.field)
        util = utilization_breakdown(space, report.social, report.field)
        return CellResult(
            key=key,
            label=label,
            redistribution=rule.value,
            exchange=regime,
            converged=report.converged,
            iterations=report.iterations,
            residuals={
                "stationarity": report.stationarity_residual,
                "policy_move": report.policy_move,
                "q_gap": report.q_gap,
            },
            welfare=wreport,
            utilization=util,
            trace=report.trace,
            report=report,
        )
    except Exception as exc:  # isolate cell failures, the matrix continues
        logger.exception("cell %s failed", key)
        return CellResult(
            key=key,
            label=label,
            redistribution=rule.value,
            exchange=regime,
            converged=False,
            iterations=0,
            residuals={},
            welfare=None,
            utilization=[],
            trace=[],
            error=f"{type(exc).__name__}: {exc}",
        )


def run_matrix(matrix: ScenarioMatrix) -> MatrixBundle:
    """Solve every design cell (in parallel when workers > 1) plus the
    benchmark row; per-cell failures are recorded, not raised."""
    bench = benchmark_payoffs(matrix.base)
    jobs = [
        (matrix.cell_config(rule, regime), matrix.settings, rule, regime)
        for rule, regime in matrix.cells
    ]
    if matrix.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=matrix.workers) as pool:
            cells = list(pool.map(_solve_cell, jobs))
    else:
        cells = [_solve_cell(job) for job in jobs]
    return MatrixBundle(benchmark=bench, cells=cells)


# -- export / parse ----------------------------------------------------------


def _welfare_rows(bundle: MatrixBundle) -> list[dict]:
    bench = bundle.benchmark
    names = bench.type_names
    rows = []
    row: dict = {"cell": "Benchmark", "redistribution": "", "exchange": ""}
    for i, name in enumerate(names):
        row[f"payoff_endogenous_{name}"] = bench.endogenous[i]
        row[f"payoff_exogenous_{name}"] = bench.exogenous[i]
    row["welfare_endogenous"] = None
    row["welfare_exogenous"] = None
    row["converged"] = True
    rows.append(row)
    for cell in bundle.cells:
        row = {
            "cell": cell.label,
            "redistribution": cell.redistribution,
            "exchange": cell.exchange,
        }
        for i, name in enumerate(names):
            if cell.welfare is not None:
                row[f"payoff_endogenous_{name}"] = float(cell.welfare.endogenous[i])
                row[f"payoff_exogenous_{name}"] = float(cell.welfare.exogenous[i])
            else:
                row[f"payoff_endogenous_{name}"] = None
                row[f"payoff_exogenous_{name}"] = None
        row["welfare_endogenous"] = (
            None if cell.welfare is None else cell.welfare.welfare_endogenous
        )
        row["welfare_exogenous"] = (
            None if cell.welfare is None else cell.welfare.welfare_exogenous
        )
        row["converged"] = cell.converged
        rows.append(row)
    return rows


def _fmt(value, decimals: int = 4) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.{decimals}f}"
    return str(value)


def write_welfare_table(bundle: MatrixBundle, path: str) -> None:
    rows = _welfare_rows(bundle)
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def read_welfare_table(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            parsed: dict = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                elif v in ("true", "false"):
                    parsed[k] = v == "true"
                else:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
        return out


def write_utilization(bundle: MatrixBundle, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["cell", "resource", "type", "urgency", "outcome", "mass"]
        )
        writer.writeheader()
        for cell in bundle.cells:
            for row in cell.utilization:
                out = {"cell": cell.key, **row}
                out["mass"] = f"{row['mass']:.10f}"
                out["urgency"] = repr(row["urgency"])
                writer.writerow(out)


def read_utilization(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            row["urgency"] = float(row["urgency"])
            row["mass"] = float(row["mass"])
            rows.append(row)
        return rows


def write_trace(trace: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(TRACE_FIELDS))
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(row[k]) for k in TRACE_FIELDS})


def read_trace(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: float(v) if v != "nan" else float("nan") for k, v in row.items()})
        return rows


def _welfare_to_dict(w: WelfareReport | None) -> dict | None:
    if w is None:
        return None
    return {
        "type_names": list(w.type_names),
        "shares": w.shares.tolist(),
        "payoff_endogenous": w.endogenous.tolist(),
        "payoff_exogenous": w.exogenous.tolist(),
        "benchmark_endogenous": w.benchmark_endogenous.tolist(),
        "benchmark_exogenous": w.benchmark_exogenous.tolist(),
        "welfare_endogenous": w.welfare_endogenous,
        "welfare_exogenous": w.welfare_exogenous,
    }


def bundle_to_dict(bundle: MatrixBundle) -> dict:
    bench = bundle.benchmark
    return {
        "schema": "multikarma-matrix-v1",
        "benchmark": {
            "type_names": list(bench.type_names),
            "delays": bench.delays.tolist(),
            "demands": bench.demands.tolist(),
            "payoff_endogenous": bench.endogenous.tolist(),
            "payoff_exogenous": bench.exogenous.tolist(),
            "welfare_endogenous": None,
            "welfare_exogenous": None,
        },
        "cells": [
            {
                "key": c.key,
                "label": c.label,
                "redistribution": c.redistribution,
                "exchange": c.exchange,
                "converged": c.converged,
                "iterations": c.iterations,
                "residuals": c.residuals,
                "welfare": _welfare_to_dict(c.welfare),
                "utilization": c.utilization,
                "error": c.error,
            }
            for c in bundle.cells
        ],
    }


def export(bundle: MatrixBundle, out_dir: str, formats: tuple[str, ...] = ("csv", "json")) -> list[str]:
    """Write the bundle's welfare table, utilization breakdown, convergence
    traces, and summary; returns the created paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if "csv" in formats:
        p = os.path.join(out_dir, "welfare_table.csv")
        write_welfare_table(bundle, p)
        paths.append(p)
        p = os.path.join(out_dir, "utilization.csv")
        write_utilization(bundle, p)
        paths.append(p)
        for cell in bundle.cells:
            if cell.trace:
                p = os.path.join(out_dir, f"trace_{cell.key}.csv")
                write_trace(cell.trace, p)
                paths.append(p)
    if "json" in formats:
        p = os.path.join(out_dir, "matrix.json")
        with open(p, "w") as fh:
            json.dump(bundle_to_dict(bundle), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(p)
    return paths


# -- solve report files -------------------------------------------------------


def solve_report_to_dict(cfg: EconomyConfig, report: SolveReport, seed: int) -> dict:
    social = report.social
    nz = np.argwhere(social.policy > 0.0)
    policy_entries = [
        [int(t), int(r), int(u), int(k), int(c), float(social.policy[t, r, u, k, c])]
        for t, r, u, k, c in nz
    ]
    return {
        "schema": "multikarma-solve-report-v1",
        "config": config_to_dict(cfg),
        "seed": seed,
        "converged": report.converged,
        "iterations": report.iterations,
        "residuals": {
            "stationarity": report.stationarity_residual,
            "policy_move": report.policy_move,
            "q_gap": report.q_gap,
        },
        "tolerances": {
            "stationarity": report.tol_stationary,
            "policy": report.tol_policy,
            "q_gap": report.tol_q_gap,
        },
        "field": {
            "bid_dist": report.field.bid_dist.tolist(),
            "delay": report.field.delay.tolist(),
            "avg_payment": report.field.avg_payment.tolist(),
            "active_payment": report.field.active_payment.tolist(),
        },
        "diagnostics": {
            "karma_account_means": report.karma_account_means.tolist(),
            "saturation_surplus": report.saturation_surplus.tolist(),
            "saturation_lost": report.saturation_lost.tolist(),
        },
        "social": {
            "dist": social.dist.tolist(),
            "policy_nonzero": policy_entries,
        },
    }


def load_social_state(path: str) -> tuple[EconomyConfig, SocialState]:
    """Rebuild the config and social state from a solve-report file."""
    with open(path) as fh:
        data = json.load(fh)
    cfg = config_from_dict(data["config"])
    space = build_state_space(cfg)
    dist = np.array(data["social"]["dist"])
    policy = np.zeros(dist.shape + (space.n_bid_cols,))
    for t, r, u, k, c, p in data["social"]["policy_nonzero"]:
        policy[t, r, u, k, c] = p
    return cfg, SocialState(dist=dist, policy=policy)


# -- subcommands --------------------------------------------------------------


def _settings_from_args(args) -> SolverSettings:
    kwargs = {}
    for name in (
        "step_size",
        "step_size_halflife",
        "perturbation_init",
        "perturbation_decay",
        "perturbation_min",
        "tol_stationary",
        "tol_policy",
        "tol_q_gap",
        "max_outer",
        "seed",
    ):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    return SolverSettings(**kwargs)


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    report = validate_config(cfg)
    print(report)
    return EXIT_OK if report.ok else EXIT_INVALID


def _cmd_solve(args) -> int:
    cfg = load_config(args.config)
    check = validate_config(cfg)
    if not check.ok:
        print(check, file=sys.stderr)
        return EXIT_INVALID
    settings = _settings_from_args(args)
    report = solve_sne(cfg, settings=settings)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(solve_report_to_dict(cfg, report, settings.seed), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_trace(report.trace, os.path.join(args.out, "trace.csv"))
    space = build_state_space(cfg)
    wreport = welfare_report(space, report.social, report.field)
    with open(os.path.join(args.out, "welfare.json"), "w") as fh:
        json.dump(_welfare_to_dict(wreport), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"converged={report.converged} iterations={report.iterations} "
        f"stationarity={report.stationarity_residual:.3e} q_gap={report.q_gap:.3e}"
    )
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def _cmd_matrix(args) -> int:
    base = load_config(args.config) if args.config else scenarios.commute_config()
    check = validate_config(base)
    if not check.ok:
        print(check, file=sys.stderr)
        return EXIT_INVALID
    cells = scenarios.design_cells()
    if args.cells:
        wanted = set(args.cells.split(","))
        cells = [
            (rule, regime)
            for rule, regime in cells
            if _cell_key(rule, regime) in wanted or regime in wanted
        ]
    matrix = ScenarioMatrix(
        base=base,
        cells=cells,
        settings=_settings_from_args(args),
        workers=args.workers,
    )
    bundle = run_matrix(matrix)
    paths = export(bundle, args.out)
    for p in paths:
        print(p)
    failures = [c.key for c in bundle.cells if not c.converged]
    if failures:
        print("non-converged cells: " + ", ".join(failures), file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg, social = load_social_state(args.policy)
    space = build_state_space(cfg)
    stats = run_simulation(
        space,
        social,
        n_agents=args.agents,
        n_days=args.days,
        seed=args.seed,
        warmup_days=args.warmup,
        collect_daily=True,
    )
    os.makedirs(args.out, exist_ok=True)
    daily_path = os.path.join(args.out, "daily.csv")
    with open(daily_path, "w", newline="") as fh:
        fh.write(f"# seed={args.seed} agents={args.agents} days={args.days}\n")
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "day",
                "resource",
                "active",
                "priority_grants",
                "gp_share",
                "delay",
                "collected",
                "karma_lost",
                "karma_total",
            ],
        )
        writer.writeheader()
        for row in stats.daily_rows:
            writer.writerow(row)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(stats.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(daily_path)
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else scenarios.benchmark_config()
    check = validate_config(cfg)
    if not check.ok:
        print(check, file=sys.stderr)
        return EXIT_INVALID
    bench = benchmark_payoffs(cfg)
    out = {
        "type_names": list(bench.type_names),
        "delays": bench.delays.tolist(),
        "demands": bench.demands.tolist(),
        "payoff_endogenous": bench.endogenous.tolist(),
        "payoff_exogenous": bench.exogenous.tolist(),
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "benchmark.json"), "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multikarma",
        description="Stationary-equilibrium engine for coupled karma economies",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file's invariants")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_validate)

    def add_solver_flags(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--step-size", dest="step_size", type=float, default=None)
        p.add_argument(
            "--step-size-halflife",
            dest="step_size_halflife",
            type=float,
            default=None,
        )
        p.add_argument(
            "--perturbation-init", dest="perturbation_init", type=float, default=None
        )
        p.add_argument(
            "--perturbation-decay", dest="perturbation_decay", type=float, default=None
        )
        p.add_argument(
            "--perturbation-min", dest="perturbation_min", type=float, default=None
        )
        p.add_argument(
            "--tol-stationary", dest="tol_stationary", type=float, default=None
        )
        p.add_argument("--tol-policy", dest="tol_policy", type=float, default=None)
        p.add_argument("--tol-q-gap", dest="tol_q_gap", type=float, default=None)
        p.add_argument("--max-outer", dest="max_outer", type=int, default=None)

    p = sub.add_parser("solve", help="solve one economy to a certified equilibrium")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    add_solver_flags(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("matrix", help="run the redistribution x exchange design matrix")
    p.add_argument("--config", default=None, help="base config (default: built-in commute)")
    p.add_argument("--out", required=True)
    p.add_argument("--cells", default=None, help="comma-separated cell keys or regimes")
    p.add_argument("--workers", type=int, default=1)
    add_solver_flags(p)
    p.set_defaults(func=_cmd_matrix)

    p = sub.add_parser("simulate", help="finite-population simulation of a solved policy")
    p.add_argument("--policy", required=True, help="solve-report JSON file")
    p.add_argument("--agents", type=int, default=10_000)
    p.add_argument("--days", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("bench", help="analytic uncontrolled-benchmark payoffs")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
