"""Command-line front end: run scenarios, sweep a parameter, plot traces.

Exit codes: 0 success, 2 validation/usage error, 3 numeric fault during
simulation.  Diagnostics go to stderr; result files are byte-stable across
reruns of identical inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import tomli

from .engine import run_scenario
from .metrics import CHANNELS, NotSettledError, SimulationTrace, summarize, tail_report
from .plant import NumericFault, TopologyError
from .scenario import (
    ValidationError,
    apply_overrides,
    load_scenario,
    scenario_from_dict,
    validate_physics,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _load_with_overrides(path: str, overrides: list[str]):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"scenario file not found: {path}")
    with open(p, "rb") as f:
        try:
            raw = tomli.load(f)
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"parse error in {path}: {exc}") from exc
    if overrides:
        raw = apply_overrides(raw, overrides)
    return scenario_from_dict(raw)


def _emit_set(spec: str) -> set[str]:
    emit = {e.strip() for e in spec.split(",") if e.strip()}
    unknown = emit - {"csv", "json", "svg"}
    if unknown:
        raise ValidationError(f"unknown emit formats: {sorted(unknown)}")
    return emit


def _default_figure(trace: SimulationTrace, out_path: Path):
    channels = [c for c in ("vuf_pcc", "v_mag_pcc_a", "v_mag_pcc_b", "v_mag_pcc_c")
                if c in trace.signals]
    _write_plot(trace, channels, out_path)


def _write_plot(trace: SimulationTrace, channels: list[str], out_path: Path):
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "mmgsim"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(9, 4.5))
    units = {CHANNELS.get(c, "") for c in channels}
    for c in channels:
        ax.plot(trace.time, trace[c], label=c, linewidth=0.9)
    ax.set_xlabel("time [s]")
    ax.set_ylabel(" / ".join(sorted(u for u in units if u)) or "value")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_run(args) -> int:
    cfg = _load_with_overrides(args.scenario, args.set or [])
    for warning in validate_physics(cfg):
        print(f"warning: {warning}", file=sys.stderr)
    emit = _emit_set(args.emit)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    trace = run_scenario(cfg)
    try:
        report = summarize(trace, cfg)
    except ValueError:
        report = tail_report(trace, cfg)

    if "csv" in emit:
        trace.to_csv(out_dir / "trace.csv")
    if "json" in emit:
        with open(out_dir / "summary.json", "w", newline="\n") as f:
            f.write(report.to_json())
    if "svg" in emit:
        _default_figure(trace, out_dir / "trace.svg")
    return EXIT_OK


def _sweep_one(payload):
    """Worker: one run of the sweep; returns (value, summary dict or None, exit code)."""
    scenario_path, overrides, param, value, out_dir = payload
    try:
        cfg = _load_with_overrides(scenario_path, overrides + [f"{param}={value}"])
        trace = run_scenario(cfg)
        try:
            report = summarize(trace, cfg)
        except ValueError:
            report = tail_report(trace, cfg)
        run_dir = Path(out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        trace.to_csv(run_dir / "trace.csv")
        with open(run_dir / "summary.json", "w", newline="\n") as f:
            f.write(report.to_json())
        return value, asdict(report), EXIT_OK
    except (ValidationError, TopologyError, NotSettledError, ValueError) as exc:
        print(f"sweep value {value}: {exc}", file=sys.stderr)
        return value, None, EXIT_VALIDATION
    except NumericFault as exc:
        print(f"sweep value {value}: {exc}", file=sys.stderr)
        return value, None, EXIT_NUMERIC


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValidationError("sweep needs a nonempty value list")
    # fail fast on a bad key before launching workers
    _load_with_overrides(args.scenario, (args.set or []) + [f"{args.param}={values[0]}"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = [(args.scenario, args.set or [], args.param, v,
                 str(out_dir / f"run_{i:03d}")) for i, v in enumerate(values)]
    workers = min(len(payloads), _max_workers())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, payloads))
    else:
        results = [_sweep_one(p) for p in payloads]

    rows = []
    worst = EXIT_OK
    for value, summary, code in results:
        worst = max(worst, code)
        if summary is not None:
            rows.append((value, summary))
    if rows:
        field_names = sorted(rows[0][1])
        lines = [",".join([args.param] + field_names)]
        for value, summary in rows:
            cells = [str(value)] + [
                "" if summary[k] is None else f"{summary[k]:.9g}" for k in field_names]
            lines.append(",".join(cells))
        with open(out_dir / "sweep.csv", "w", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    return worst


def _max_workers() -> int:
    env = os.environ.get("MMG_SIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"MMG_SIM_THREADS must be an integer, got {env!r}")
    return max(1, os.cpu_count() or 1)


def cmd_plot(args) -> int:
    path = Path(args.trace)
    if not path.exists():
        raise ValidationError(f"trace file not found: {args.trace}")
    trace = SimulationTrace.from_csv(path)
    channels = [c.strip() for c in args.channels.split(",") if c.strip()]
    missing = [c for c in channels if c not in trace.signals]
    if missing:
        raise ValidationError(
            f"unknown channels {missing}; available: {', '.join(trace.signals)}")
    _write_plot(trace, channels, Path(args.out))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_scenario(args.scenario) if Path(args.scenario).exists() else None
    if cfg is None:
        raise ValidationError(f"scenario file not found: {args.scenario}")
    warnings = validate_physics(cfg)
    for warning in warnings:
        print(f"warning: {warning}")
    print(f"ok: {args.scenario} ({len(warnings)} warning(s))")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmgsim",
                                     description="multi-microgrid compensation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", default=".")
    run.add_argument("--set", action="append", metavar="KEY=VALUE")
    run.add_argument("--emit", default="csv,json")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run a scenario once per parameter value")
    sweep.add_argument("--scenario", required=True)
    sweep.add_argument("--param", required=True, metavar="SECTION.KEY")
    sweep.add_argument("--values", required=True, metavar="V1,V2,...")
    sweep.add_argument("--out", default=".")
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep.set_defaults(func=cmd_sweep)

    plot = sub.add_parser("plot", help="render trace channels to SVG")
    plot.add_argument("--trace", required=True)
    plot.add_argument("--channels", required=True)
    plot.add_argument("--out", default="plot.svg")
    plot.set_defaults(func=cmd_plot)

    validate = sub.add_parser("validate", help="check a scenario file")
    validate.add_argument("--scenario", required=True)
    validate.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, TopologyError, NotSettledError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericFault as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
