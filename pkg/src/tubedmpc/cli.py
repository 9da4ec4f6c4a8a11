"""Command-line interface for tubedmpc."""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path

from tubedmpc import __version__
from tubedmpc.agents import MODE_KINDS, ControllerMode
from tubedmpc.config import (
    get_config_value,
    load_config,
    parse_assignments,
    run_settings,
    set_config_value,
)
from tubedmpc.errors import ScenarioError, TubeDmpcError
from tubedmpc.events import log_event
from tubedmpc.setgeom import bounding_box


def main(argv=None):
    """Main CLI entry point."""
    parser = argparse.ArgumentParser(
        prog="tubedmpc",
        description="Robust tube-based distributed MPC with consistency constraints: "
                    "initialize, simulate and compare multi-robot scenarios.",
    )
    parser.add_argument(
        "--version", action="version", version=f"tubedmpc {__version__}"
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0,
        help="More log output (-v: info, -vv: debug)",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # --- run ---
    run_parser = subparsers.add_parser("run", help="Simulate a scenario in closed loop")
    _scenario_args(run_parser)
    run_parser.add_argument("--mode", default="proposed", choices=MODE_KINDS, help="Controller mode")
    run_parser.add_argument("--iterations", type=int, default=1,
                            help="Solve/update iterations per step (proposed mode only)")
    run_parser.add_argument("--order", help="Comma-separated agent order for the sequential mode")
    _sim_args(run_parser)
    run_parser.add_argument("--strict", action="store_true", default=None,
                            help="Abort on the first runtime guarantee violation")

    # --- init-report ---
    init_parser = subparsers.add_parser("init-report", help="Run initialization and print the ingredients")
    _scenario_args(init_parser)
    init_parser.add_argument("--out", help="Directory for per-agent ingredient JSON files")

    # --- compare ---
    cmp_parser = subparsers.add_parser("compare", help="Compare controller modes on one scenario")
    _scenario_args(cmp_parser)
    cmp_parser.add_argument(
        "--modes", nargs="+", default=["proposed", "fixedref", "sequential"],
        help="Modes to compare, e.g. proposed fixedref sequential proposed:4",
    )
    _sim_args(cmp_parser)

    # --- scenarios ---
    subparsers.add_parser("scenarios", help="List bundled scenarios")

    # --- config ---
    config_parser = subparsers.add_parser("config", help="View or set configuration values")
    config_parser.add_argument("action", choices=["get", "set", "list"], help="Action to perform")
    config_parser.add_argument("key", nargs="?", help="Config key name")
    config_parser.add_argument("value", nargs="?", help="Value to set (for 'set' action)")

    # --- events ---
    events_parser = subparsers.add_parser("events", help="Show recorded runs and guarantee violations")
    events_parser.add_argument("--limit", type=int, default=20, help="Number of recent events to show")
    events_parser.add_argument("--scenario", help="Only count runs of this scenario")

    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    commands = {
        "run": lambda: _cmd_run(args),
        "init-report": lambda: _cmd_init_report(args),
        "compare": lambda: _cmd_compare(args),
        "scenarios": _cmd_scenarios,
        "config": lambda: _cmd_config(args),
        "events": lambda: _cmd_events(args),
    }

    cmd_fn = commands.get(args.command)
    if cmd_fn is None:
        parser.print_help()
        return
    try:
        cmd_fn()
    except TubeDmpcError as exc:
        print(f"Error: {exc}")
        sys.exit(1)


# ---------------------------------------------------------------------------
# Shared arguments
# ---------------------------------------------------------------------------

def _scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="connectivity", help="Scenario file or bundled scenario name")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a scenario value, e.g. xi11=3.0, cbar=0.1 or agents[1].x0[0]=-2.5 (repeatable)",
    )


def _sim_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--runs", type=int, help="Monte-Carlo runs (config: runs)")
    p.add_argument("--seed", type=int, help="Master seed (config: seed)")
    p.add_argument("--tsim", type=int, help="Simulated steps (default: scenario tsim)")
    p.add_argument("--out", help="Output directory (config: output_dir)")
    p.add_argument("--workers", type=int, help="Worker threads (config: workers)")
    p.add_argument("--no-disturbance", action="store_true", help="Run with w = 0")
    p.add_argument("--control-substeps", type=int, help="RK4 substeps per sampling interval")


def _setup_logging(verbose: int) -> None:
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        try:
            level = getattr(logging, str(get_config_value("log_level", "WARNING")).upper(), logging.WARNING)
        except TubeDmpcError:
            level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def parse_mode(text: str, order=None) -> ControllerMode:
    """``proposed``, ``proposed:K``, ``fixedref`` or ``sequential``."""
    kind, _, iterations = text.partition(":")
    if kind == "proposed":
        return ControllerMode.proposed(int(iterations) if iterations else 1)
    if iterations:
        raise ScenarioError(f"iterations only apply to the proposed mode, got {text!r}")
    if kind == "fixedref":
        return ControllerMode.fixed_reference()
    if kind == "sequential":
        return ControllerMode("sequential", 1, order)
    raise ScenarioError(f"unknown mode {text!r}; expected one of {', '.join(MODE_KINDS)}")


def _parse_order(text):
    if not text:
        return None
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise ScenarioError(f"--order expects comma-separated agent ids, got {text!r}") from exc


def _prepare(args):
    """Load the scenario and run initialization."""
    from tubedmpc.harness import initialize
    from tubedmpc.scenarios import load_scenario

    settings = run_settings(
        runs=getattr(args, "runs", None),
        seed=getattr(args, "seed", None),
        workers=getattr(args, "workers", None),
        strict=getattr(args, "strict", None),
        output_dir=getattr(args, "out", None),
    )
    scenario = load_scenario(args.scenario, parse_assignments(args.overrides))
    print(f"Initializing {scenario.name} ({len(scenario.agents)} agents, N={scenario.horizon})...")
    init = initialize(
        scenario,
        rpi_eps=float(settings["rpi_eps"]),
        certify_samples=int(settings["certify_samples"]),
        solver=str(settings["solver"]),
        seed=int(settings["seed"]),
        substeps=getattr(args, "control_substeps", None),
    )
    if settings["record_events"]:
        log_event("initialized", scenario.name, seconds=round(sum(init.timings.values()), 3))
    return scenario, init, settings


def _sim_kwargs(args, settings):
    return {
        "tsim": args.tsim,
        "disturbance_scale": 0.0 if args.no_disturbance else None,
        "strict": bool(settings["strict"]),
        "solver": str(settings["solver"]),
        "record_events": bool(settings["record_events"]),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_run(args):
    """Simulate one controller mode."""
    from tubedmpc.harness import simulate, summarize, write_results

    if args.iterations != 1 and args.mode != "proposed":
        raise ScenarioError("--iterations only applies to --mode proposed")
    mode = ControllerMode(args.mode, args.iterations, _parse_order(args.order))
    scenario, init, settings = _prepare(args)
    seed, runs = int(settings["seed"]), int(settings["runs"])
    print(f"Running {mode.label}: {runs} run(s), seed {seed}...")
    metrics = simulate(init, mode, seed, runs, int(settings["workers"]), **_sim_kwargs(args, settings))
    written = write_results(settings["output_dir"], scenario.name, mode.label, seed, metrics, {
        "runs": runs, "seed": seed, "mode": mode.label, "overrides": args.overrides,
        "disturbance": not args.no_disturbance,
    })
    summary = summarize(metrics)

    print(f"\n  {scenario.name} / {mode.label} ({runs} run(s))")
    print(f"  {'=' * 50}")
    for i, cost in summary["mean_costs"].items():
        print(f"  Agent {i}: mean actual cost {cost:.6g}")
    print(f"  Mean step time:        {summary['mean_step_time']:.4f} s")
    if summary["min_distance"] is not None:
        print(f"  Inter-agent distance:  {summary['min_distance']:.4f} .. {summary['max_distance']:.4f}")
    print(f"  Infeasible solves:     {summary['infeasible']}")
    print(f"  Violations recorded:   {summary['violations']}")
    print(f"\n  Results written to {Path(written[-1]).parent}")
    print()


def _cmd_init_report(args):
    """Run the initialization steps and print the ingredients."""
    scenario, init, _ = _prepare(args)

    print(f"\n  Initialization: {scenario.name}")
    print(f"  {'=' * 50}")
    for i in sorted(init.specs):
        spec = init.specs[i]
        ti = spec.terminal
        cs = spec.consistency
        print(f"  Agent {i}")
        print(f"    RPI half-widths:     {_fmt(spec.tube.p_bar)}")
        print(f"    Input tightening:    {_fmt(bounding_box(spec.tube.delta_u).halfwidths)}")
        print(f"    Terminal level:      {ti.level:.6g} (sigma {ti.sigma:g}, gamma {ti.gamma:.6g})")
        print(f"    Consistency radius:  {cs.radius:.6g} (box {cs.C_bar.halfwidths[0]:.6g})")
        failed = init.terminal_reports[i].failed()
        print(f"    Terminal certificate: {'OK' if not failed else 'FAILED ' + ', '.join(failed)}")
    report = init.reference_report
    print(f"\n  Reference check")
    print(f"  {'-' * 50}")
    print(f"  State margin:          {report.state_margin:.4g}")
    print(f"  Coupled margin:        {report.coupled_margin:.4g}")
    print(f"  Consistency margin:    {report.consistency_margin:.4g}")
    for step, seconds in init.timings.items():
        print(f"  {step}: {seconds:.2f} s")

    if args.out:
        written = init.write(args.out)
        print(f"\n  Wrote {len(written)} file(s) to {Path(args.out).expanduser()}")
    print()


def _cmd_compare(args):
    """Compare modes on one scenario."""
    from tubedmpc.harness import compare, write_comparison, write_results

    modes = [parse_mode(m) for m in args.modes]
    scenario, init, settings = _prepare(args)
    seed, runs = int(settings["seed"]), int(settings["runs"])
    print(f"Comparing {', '.join(m.label for m in modes)}: {runs} run(s) each, seed {seed}...")
    comparison, batches = compare(init, modes, seed, runs, int(settings["workers"]),
                                  **_sim_kwargs(args, settings))
    for label, metrics in batches.items():
        write_results(settings["output_dir"], scenario.name, label, seed, metrics)
    written = write_comparison(settings["output_dir"], comparison, seed)

    if settings["record_events"]:
        log_event("compare_finished", scenario.name, modes=list(batches), runs=runs)

    print(f"\n  Relative actual cost (normalized by {comparison.baseline})")
    print(f"  {'=' * 50}")
    for label in batches:
        ratios = [f"{r['ratio']:.2f}" for r in comparison.rows if r["mode"] == label]
        print(f"  {label:<20} {'  '.join(ratios)}   step {comparison.step_time(label):.4f} s")
    print(f"\n  Results written to {Path(written[0]).parent}")
    print()


def _cmd_scenarios():
    """List bundled scenarios."""
    from tubedmpc.scenarios import list_scenarios

    scenarios = list_scenarios()
    if not scenarios:
        print("No bundled scenarios found.")
        return
    print(f"\n  Bundled Scenarios ({len(scenarios)})")
    print(f"  {'=' * 50}")
    for s in scenarios:
        print(f"  {s['name']}")
        if s["description"]:
            print(f"         {s['description']}")
    print()


def _cmd_config(args):
    """View or set configuration values."""
    if args.action == "list":
        config = load_config()
        print(f"\n  tubedmpc Configuration")
        print(f"  {'=' * 50}")
        for k, v in sorted(config.items()):
            print(f"  {k}: {v}")
        print()

    elif args.action == "get":
        if not args.key:
            print("Error: 'get' requires a key name. Run 'tubedmpc config list' to see all keys.")
            sys.exit(1)
        val = get_config_value(args.key)
        if val is None:
            print(f"  {args.key}: (not set)")
        else:
            print(f"  {args.key}: {val}")

    elif args.action == "set":
        if not args.key or args.value is None:
            print("Error: 'set' requires a key and value. Example: tubedmpc config set runs 100")
            sys.exit(1)
        config = set_config_value(args.key, args.value)
        print(f"  Set {args.key}: {config[args.key]}")


def _cmd_events(args):
    """Show the event log."""
    from tubedmpc.events import get_recent_events, get_run_stats, get_violation_counts

    stats = get_run_stats(args.scenario)
    print(f"\n  tubedmpc Runs")
    print(f"  {'=' * 50}")
    print(f"  Runs started:          {stats['runs_started']}")
    print(f"  Runs finished:         {stats['runs_finished']}")
    print(f"  Guarantee violations:  {stats['violations']}")
    print(f"  Solver fallbacks:      {stats['fallbacks']}")
    if stats["last_run"]:
        print(f"  Last run:              {stats['last_run'][:19]}")
    for mode, count in sorted(stats["modes"].items()):
        print(f"    {mode}: {count}")

    counts = get_violation_counts()
    if counts:
        print(f"\n  Violations by kind")
        print(f"  {'-' * 50}")
        for kind, count in sorted(counts.items()):
            print(f"  {kind}: {count}")

    recent = get_recent_events(args.limit)
    if recent:
        print(f"\n  Recent Events")
        print(f"  {'-' * 50}")
        for evt in recent:
            try:
                ts = datetime.fromisoformat(evt["timestamp"]).strftime("%b %d %H:%M")
            except ValueError:
                ts = evt["timestamp"][:16]
            where = " ".join(part for part in (
                evt["scenario"] or "",
                evt["mode"] or "",
                f"run {evt['run_id']}" if evt["run_id"] is not None else "",
                f"agent {evt['agent']}" if evt["agent"] is not None else "",
                f"k={evt['k']}" if evt["k"] is not None else "",
            ) if part)
            print(f"  {ts}  {evt['event'].replace('_', ' ')}  {where}")
    print()


def _fmt(values) -> str:
    return "(" + ", ".join(f"{v:.4f}" for v in values) + ")"


if __name__ == "__main__":
    main()
