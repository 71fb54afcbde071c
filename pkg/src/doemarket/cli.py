"""Command-line harness: run a clearing, compare two runs, validate a case.

Exit codes: 0 success/converged, 2 iteration budget exhausted, 1 any error.
All outputs are UTF-8 CSV/JSON in the chosen output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cases as bundled
from .coordinator import run_clearing
from .netmodel import CaseError, case_digest, load_case


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _resolve_out(args_out):
    env = os.environ.get("DOEMARKET_OUT")
    out = Path(args_out or env or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    if str(path).startswith("builtin:"):
        return load_case(bundled.builtin_case(str(path).split(":", 1)[1]))
    return load_case(path)


def _apply_overrides(market, args):
    from dataclasses import replace
    kw = {}
    if args.rho is not None:
        if args.rho <= 0:
            raise CaseError("--rho must be > 0")
        kw["rho"] = args.rho
    if args.alpha is not None:
        if args.alpha < 0:
            raise CaseError("--alpha must be >= 0")
        kw["alpha"] = args.alpha
    if args.scenarios is not None:
        if args.scenarios < 1:
            raise CaseError("--scenarios must be >= 1")
        kw["scenarios"] = args.scenarios
    if args.max_iters is not None:
        if args.max_iters < 1:
            raise CaseError("--max-iters must be >= 1")
        kw["max_iters"] = args.max_iters
    return replace(market, **kw) if kw else market


def write_run_artifacts(out, case, prosumers, market, result, seed=0):
    """Manifest, residual/communication traces, reports; returns the manifest."""
    manifest = {
        "mode": result.mode,
        "config_hash": case_digest(case, prosumers, market),
        "iterations": result.iterations,
        "converged": bool(result.converged),
        "objective": result.objective,
        "seed": seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    tr = result.trace
    _write_csv(out / "iteration_trace.csv",
               ["iter", "r_trade_recip", "r_trade_step", "r_env_gap", "r_env_step",
                "messages_sent", "messages_censored"],
               [(k, tr.r_trade_recip[k], tr.r_trade_step[k], tr.r_env_gap[k],
                 tr.r_env_step[k], tr.messages_sent[k], tr.messages_censored[k])
                for k in range(tr.iterations())])
    _write_csv(out / "trades_trace.csv",
               ["iter", "i", "j", "t", "e", "e_hat", "lam", "sent"],
               result.trade_rows)
    _write_csv(out / "doe_report.csv",
               ["iter", "i", "t", "ask", "allocation", "psi"],
               result.doe_rows)
    if result.breakdown is not None:
        bd = result.breakdown
        rows = []
        for k, n in enumerate(bd.prosumer_nodes):
            for t in range(bd.voltage.shape[1]):
                rows += [
                    (n, t, "congestion_send", bd.congestion_send[k, t]),
                    (n, t, "congestion_recv", bd.congestion_recv[k, t]),
                    (n, t, "voltage", bd.voltage[k, t]),
                    (n, t, "energy", bd.energy[k, t]),
                    (n, t, "loss", bd.loss[k, t]),
                    (n, t, "residual", bd.residual[k, t]),
                ]
        _write_csv(out / "price_breakdown.csv", ["i", "t", "component", "value"], rows)

    integrity = dict(result.integrity)
    integrity["surpluses"] = {str(k): v for k, v in result.surpluses.items()}
    integrity["aggregate_surplus"] = float(sum(result.surpluses.values()))
    (out / "integrity.json").write_text(json.dumps(integrity, indent=2))

    rows = []
    for s, sol in enumerate(result.dso_flows):
        rows += sol.csv_rows(scenario=s + 1)
    if rows:
        _write_csv(out / "flows.csv",
                   ["scenario", "t", "element_type", "element_id", "quantity", "value"],
                   rows)
    return manifest


def cmd_run(args):
    try:
        case, prosumers, market = _load(args.case)
        market = _apply_overrides(market, args)
    except CaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = _resolve_out(args.out)
    try:
        result = run_clearing(case, prosumers, market, mode=args.mode,
                              doe_on=not args.doe_off)
    except Exception as exc:
        print(f"error: clearing failed: {exc}", file=sys.stderr)
        return 1
    write_run_artifacts(out, case, prosumers, market, result, seed=args.seed)
    print(f"{args.mode}: {'converged' if result.converged else 'NOT converged'} "
          f"in {result.iterations} iterations, objective {result.objective:.6f}, "
          f"artifacts in {out}")
    if not result.converged:
        print("error: iteration budget exhausted before convergence", file=sys.stderr)
        return 2
    return 0


def _metrics(run_dir):
    run_dir = Path(run_dir)
    needed = ["manifest.json", "integrity.json", "iteration_trace.csv"]
    for name in needed:
        if not (run_dir / name).exists():
            raise FileNotFoundError(f"{run_dir}: missing artifact {name}")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    integrity = json.loads((run_dir / "integrity.json").read_text())
    sent = 0
    with open(run_dir / "iteration_trace.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            sent += int(row["messages_sent"])
    return {
        "iterations": manifest["iterations"],
        "converged": int(manifest["converged"]),
        "objective": manifest["objective"],
        "voltage_violations": integrity["voltage_violations"],
        "line_overloads": integrity["line_overloads"],
        "total_loss_energy": integrity["total_loss_energy"],
        "aggregate_surplus": integrity["aggregate_surplus"],
        "messages_sent": sent,
    }


def cmd_compare(args):
    try:
        a = _metrics(args.run_a)
        b = _metrics(args.run_b)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = _resolve_out(args.out)
    rows = [(key, a[key], b[key], b[key] - a[key]) for key in a]
    _write_csv(out / "compare.csv", ["metric", "run_a", "run_b", "delta"], rows)
    width = max(len(k) for k in a) + 2
    lines = [f"{'metric'.ljust(width)}{'run_a':>16}{'run_b':>16}{'delta':>16}"]
    for key, va, vb, dv in rows:
        lines.append(f"{key.ljust(width)}{va:>16.6g}{vb:>16.6g}{dv:>16.6g}")
    text = "\n".join(lines)
    (out / "compare.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_validate(args):
    try:
        case, prosumers, market = _load(args.case)
    except CaseError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    print(f"ok: {len(case.nodes)} nodes, {len(case.lines)} lines, "
          f"{len(prosumers)} prosumers, horizon {case.horizon}, "
          f"scenarios {market.scenarios}")
    return 0


def cmd_cases(args):
    paths = bundled.write_cases(args.out or "cases")
    for p in paths:
        print(p)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="doemarket",
        description="Envelope-constrained peer-to-peer energy market clearing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one market clearing")
    run.add_argument("--case", required=True, help="case JSON path or builtin:<name>")
    run.add_argument("--mode", choices=["admm", "coca"], default="admm")
    run.add_argument("--out", default=None)
    run.add_argument("--rho", type=float, default=None)
    run.add_argument("--alpha", type=float, default=None)
    run.add_argument("--scenarios", type=int, default=None)
    run.add_argument("--max-iters", type=int, default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--doe-off", action="store_true",
                     help="pin envelopes to a huge constant (baseline runs)")
    run.set_defaults(func=cmd_run)

    comp = sub.add_parser("compare", help="compare two completed run directories")
    comp.add_argument("run_a")
    comp.add_argument("run_b")
    comp.add_argument("--out", default=None)
    comp.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate", help="load and validate a case file")
    val.add_argument("--case", required=True)
    val.set_defaults(func=cmd_validate)

    dump = sub.add_parser("cases", help="write the bundled cases as JSON")
    dump.add_argument("--out", default=None)
    dump.set_defaults(func=cmd_cases)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
