"""Initialization, closed-loop Monte-Carlo simulation, metrics and persistence."""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np

from tubedmpc import events
from tubedmpc.agents import Agent, ControllerMode, LatencyModel, MessageBus, run_time_step
from tubedmpc.coupling import CouplingGraph, eval_constraint
from tubedmpc.errors import InitializationError, ScenarioError, TheoremViolation, TubeDmpcError
from tubedmpc.model import DisturbanceSpec, closed_loop_step
from tubedmpc.ocp import DEFAULT_SOLVER, FEAS_TOL, TrajectoryWindow
from tubedmpc.refupdate import (
    ReferenceReport,
    check_consistency_coordinates,
    compute_initial_trajectories,
    consistency_sets,
    validate_references,
)
from tubedmpc.scenarios import Scenario
from tubedmpc.setgeom import contains, violation
from tubedmpc.subsystem import SubsystemSpec
from tubedmpc.terminal import TerminalReport, select_gamma, verify_terminal_assumptions
from tubedmpc.tube import DEFAULT_RPI_EPS, build_tube

logger = logging.getLogger(__name__)

TUBE_TOL = FEAS_TOL
CONSTRAINT_TOL = 1e-6


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

@dataclass
class Initialization:
    """Everything the controllers need, computed once per scenario."""

    scenario: Scenario
    specs: dict[int, SubsystemSpec]
    graph: CouplingGraph
    init: dict[int, TrajectoryWindow]
    refs: dict[int, TrajectoryWindow]
    reference_report: ReferenceReport
    terminal_reports: dict[int, TerminalReport]
    timings: dict[str, float] = field(default_factory=dict)

    def make_agents(self, solver: str = DEFAULT_SOLVER) -> dict[int, Agent]:
        """Fresh agents holding the initial references."""
        return {i: Agent(spec, self.graph, self.scenario.horizon, self.refs[i], self.init[i], solver)
                for i, spec in self.specs.items()}

    def agent_dict(self, i: int) -> dict[str, Any]:
        spec = self.specs[i]
        return {
            "agent": i,
            "x0": spec.x0.tolist(),
            "xi": spec.xi.tolist(),
            "u_xi": spec.u_xi.tolist(),
            "tube": spec.tube.to_dict(),
            "terminal": spec.terminal.to_dict(),
            "terminal_certificate": self.terminal_reports[i].to_dict(),
            "consistency": spec.consistency.to_dict(),
            "initial_trajectory": self.init[i].to_dict(),
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.name,
            "horizon": self.scenario.horizon,
            "dt": self.scenario.dt,
            "agents": [self.agent_dict(i) for i in sorted(self.specs)],
            "constraints": [c.to_dict() for c in self.graph.constraints],
            "reference_check": self.reference_report.to_dict(),
            "timings": dict(self.timings),
        }

    def write(self, out_dir: Union[str, Path]) -> list[Path]:
        """Dump the ingredients: one JSON per agent plus a summary file."""
        out = Path(out_dir).expanduser()
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for i in sorted(self.specs):
            path = out / f"{self.scenario.name}_agent{i}.json"
            with open(path, "w") as f:
                json.dump(self.agent_dict(i), f, indent=2)
            written.append(path)
        summary = out / f"{self.scenario.name}_init.json"
        data = self.to_dict()
        data["agents"] = [p.name for p in written]
        with open(summary, "w") as f:
            json.dump(data, f, indent=2)
        written.append(summary)
        return written


@contextmanager
def _step(number: int, label: str, timings: dict[str, float]) -> Iterator[None]:
    started = time.perf_counter()
    try:
        yield
    except InitializationError:
        raise
    except TubeDmpcError as exc:
        raise InitializationError(number, str(exc)) from exc
    timings[label] = time.perf_counter() - started
    logger.info("initialization step %d (%s) done in %.2fs", number, label, timings[label])


def initialize(scenario: Scenario, rpi_eps: float = DEFAULT_RPI_EPS, certify_samples: int = 1000,
               solver: str = DEFAULT_SOLVER, seed: int = 0, substeps: Optional[int] = None) -> Initialization:
    """Run the five initialization steps for every agent.

    1. model closure (target is an equilibrium inside the constraints),
    2. RPI set and tightened input set,
    3. terminal ingredients with certified levels,
    4. initially feasible trajectories from the centralized problem,
    5. consistency sets and a check of the initial references.
    """
    graph = scenario.graph()
    timings: dict[str, float] = {}
    specs: dict[int, SubsystemSpec] = {}

    with _step(1, "closure", timings):
        dyns = {}
        for a in scenario.agents:
            dyns[a.id] = scenario.dynamics(a.id, substeps)
            if any(i < 0 or i >= a.model.state_dim for i in scenario.consistency_indices):
                raise InitializationError(1, f"agent {a.id}: consistency indices {scenario.consistency_indices} "
                                             f"out of range")
            drift = dyns[a.id].step(a.xi, a.u_xi) - a.xi
            if np.max(np.abs(drift)) > 1e-8:
                raise InitializationError(1, f"agent {a.id}: target is not a rest point of the nominal model")

    with _step(2, "tube", timings):
        for a in scenario.agents:
            tube = build_tube(a.model, a.lam, a.W, a.U, scenario.dt, rpi_eps)
            spec = SubsystemSpec(a.id, dyns[a.id], tube, a.Q, a.R, a.x0, a.xi, a.u_xi, scenario.alpha,
                                 scenario.beta, scenario.consistency_indices, a.X)
            if not contains(tube.U_hat, a.u_xi):
                raise InitializationError(2, f"agent {a.id}: steady input is outside the tightened input set")
            if spec.X_hat is not None and not contains(spec.X_hat, a.xi):
                raise InitializationError(2, f"agent {a.id}: target is outside the tightened state set")
            specs[a.id] = spec
            logger.info("agent %d: RPI half-widths %s (%d terms)", a.id,
                        np.array2string(tube.p_bar, precision=4), tube.rpi_terms)

    terminal_reports: dict[int, TerminalReport] = {}
    with _step(3, "terminal", timings):
        terminals = select_gamma(specs, graph, certify_samples, seed)
        specs = {i: s.evolve(terminal=terminals[i]) for i, s in specs.items()}
        for i, spec in specs.items():
            neighbors = {j: (specs[j], specs[j].terminal) for j in graph.neighbors(i)}
            report = verify_terminal_assumptions(spec.terminal, spec, neighbors, graph, certify_samples, seed + i)
            if not report.passed:
                raise InitializationError(3, f"agent {i}: terminal certificate failed for {report.failed()}")
            terminal_reports[i] = report

    with _step(4, "initial trajectories", timings):
        init = compute_initial_trajectories(specs, graph, scenario.horizon, scenario.init_objective,
                                            scenario.init_guess, solver)

    with _step(5, "consistency", timings):
        specs = {i: s.evolve(consistency=consistency_sets(s, scenario.c_bar)) for i, s in specs.items()}
        check_consistency_coordinates(graph, specs)
        refs = {i: init[i].reference() for i in specs}
        report = validate_references(refs, specs, graph, previous_optimal=init)
        if not report.passed:
            raise InitializationError(5, "; ".join(report.failures))

    return Initialization(scenario, specs, graph, init, refs, report, terminal_reports, timings)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    """Outcome of one closed-loop run."""

    run_id: int
    seed: int
    mode: str
    steps: int
    costs: dict[int, float]
    step_times: list[float]
    min_distance: list[float]
    max_distance: list[float]
    final_excess: dict[int, float]
    settled_since: dict[int, Optional[int]]
    nominal_distance: dict[int, list[float]]
    violations: list[dict[str, Any]]
    acceptance: dict[int, float]
    stats: dict[int, dict[str, Any]]
    bus: dict[str, Any]
    reference_checks: int = 0
    reference_failures: int = 0
    trajectory: Optional[np.ndarray] = field(default=None, repr=False)
    columns: tuple[str, ...] = field(default=(), repr=False)

    @property
    def mean_step_time(self) -> float:
        return float(np.mean(self.step_times)) if self.step_times else 0.0

    @property
    def infeasible(self) -> int:
        return sum(1 for v in self.violations if v["kind"] == "ocp_infeasible")

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "mode": self.mode,
            "steps": self.steps,
            "costs": {str(i): c for i, c in self.costs.items()},
            "mean_step_time": self.mean_step_time,
            "step_times": list(self.step_times),
            "min_distance": min(self.min_distance) if self.min_distance else None,
            "max_distance": max(self.max_distance) if self.max_distance else None,
            "final_excess": {str(i): v for i, v in self.final_excess.items()},
            "settled_since": {str(i): v for i, v in self.settled_since.items()},
            "violations": list(self.violations),
            "acceptance": {str(i): v for i, v in self.acceptance.items()},
            "stats": {str(i): s for i, s in self.stats.items()},
            "bus": self.bus,
            "reference_checks": self.reference_checks,
            "reference_failures": self.reference_failures,
        }


def _columns(specs: dict[int, SubsystemSpec]) -> tuple[str, ...]:
    spec = next(iter(specs.values()))
    n, m = spec.state_dim, spec.input_dim
    cols = ["k", "agent"]
    for prefix, dim in (("x", n), ("x_hat", n), ("x_ref", n), ("u", m), ("u_hat", m)):
        cols += [f"{prefix}{d + 1}" for d in range(dim)]
    return tuple(cols)


def _pair_distances(states: dict[int, np.ndarray], idx: list[int]) -> np.ndarray:
    ids = sorted(states)
    out = [np.linalg.norm(states[a][idx] - states[b][idx]) for p, a in enumerate(ids) for b in ids[p + 1:]]
    return np.array(out)


def _settled_since(excess: np.ndarray) -> Optional[int]:
    """First step after which every remaining state stays inside ``xi + P``."""
    inside = excess <= TUBE_TOL
    if inside.size == 0 or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    return int(outside[-1] + 1) if outside.size else 0


def _disturbances(initialization: Initialization, scale: float) -> dict[int, DisturbanceSpec]:
    return {i: DisturbanceSpec(initialization.scenario.agent(i).W, spec.tube.W_d, scale)
            for i, spec in initialization.specs.items()}


def simulate_run(initialization: Initialization, mode: ControllerMode, run_id: int, seed_seq: np.random.SeedSequence,
                 *, tsim: Optional[int] = None, disturbance_scale: Optional[float] = None, strict: bool = False,
                 solver: str = DEFAULT_SOLVER, executor: Any = None, record_events: bool = True,
                 keep_trajectory: bool = True) -> RunMetrics:
    """One closed-loop run from the scenario's initial states."""
    sc = initialization.scenario
    specs = initialization.specs
    ids = sorted(specs)
    steps = sc.tsim if tsim is None else tsim
    scale = sc.disturbance_scale if disturbance_scale is None else disturbance_scale
    mode = mode.resolved(ids)
    agents = initialization.make_agents(solver)
    children = seed_seq.spawn(len(ids) + 1)
    rngs = {i: np.random.default_rng(children[pos]) for pos, i in enumerate(ids)}
    bus = MessageBus(initialization.graph, np.random.default_rng(children[-1]), LatencyModel(*sc.latency))
    disturbances = _disturbances(initialization, scale)
    idx = list(sc.consistency_indices)
    run_seed = int(seed_seq.generate_state(1)[0])
    if record_events:
        events.log_event("run_started", sc.name, mode.label, run_id, seed=run_seed, steps=steps)

    states = {i: np.array(specs[i].x0) for i in ids}
    costs = {i: 0.0 for i in ids}
    step_times: list[float] = []
    min_d: list[float] = []
    max_d: list[float] = []
    excess = {i: [] for i in ids}
    nominal_distance: dict[int, list[float]] = {i: [] for i in ids}
    violations: list[TheoremViolation] = []
    rows = []
    ref_failures = 0

    for k in range(steps):
        refs_now = {i: agents[i].ref.states[0] for i in ids}
        step = run_time_step(agents, states, k, mode, bus, executor, strict)
        step_times.append(step.step_time)
        violations.extend(step.violations)
        report = validate_references(step.refs, specs, initialization.graph, previous_optimal=step.solutions)
        if not report.passed:
            ref_failures += 1
            if mode.kind == "proposed":
                exc = TheoremViolation("reference_check", None, k, "; ".join(report.failures))
                if strict:
                    raise exc
                logger.warning("%s", exc)
                violations.append(exc)
            else:
                logger.debug("k=%d: %s references fail the check: %s", k, mode.label, report.failures)
        for i in ids:
            spec = specs[i]
            sol = step.solutions[i]
            x_hat, u_hat = sol.states[0], sol.inputs[0]
            gap = float(np.max(violation(spec.tube.P, states[i] - x_hat)))
            if gap > TUBE_TOL:
                exc = TheoremViolation("tube_membership", i, k, f"{gap:.3g} outside x_hat + P")
                if strict:
                    raise exc
                logger.warning("%s", exc)
                violations.append(exc)
            u = step.inputs[i]
            costs[i] += float(spec.stage_cost(states[i], u))
            excess[i].append(float(np.max(np.abs(states[i] - spec.xi) - spec.tube.p_bar)))
            nominal_distance[i].append(float(np.linalg.norm(x_hat - spec.xi)))
            if keep_trajectory:
                rows.append(np.concatenate([[k, i], states[i], x_hat, refs_now[i], u, u_hat]))
        for c in initialization.graph.constraints:
            value = float(np.max(eval_constraint(c, {p: states[p] for p in c.participants})))
            if value > CONSTRAINT_TOL:
                exc = TheoremViolation("constraint_violation", None, k, f"{c.label} by {value:.3g}")
                if strict:
                    raise exc
                logger.warning("%s", exc)
                violations.append(exc)
        dists = _pair_distances(states, idx)
        if dists.size:
            min_d.append(float(dists.min()))
            max_d.append(float(dists.max()))

        for i in ids:
            spec = specs[i]
            sol = step.solutions[i]
            substeps = 1 if spec.dyn.model.discrete else spec.dyn.substeps
            w = np.array([disturbances[i].sample(rngs[i]) for _ in range(substeps)])
            result = closed_loop_step(spec.dyn, states[i], sol.states[0], sol.inputs[0], spec.tube.aux,
                                      w[0] if substeps == 1 else w)
            states[i] = result.x

    records = [{"kind": v.kind, "agent": v.agent, "k": v.k, "detail": str(v.detail)} for v in violations]
    if record_events:
        for v in records:
            if v["kind"] == "sequential_recovered":
                events.log_event("sequential_recovered", sc.name, mode.label, run_id, v["agent"], v["k"])
            else:
                events.log_event("theorem_violation", sc.name, mode.label, run_id, v["agent"], v["k"],
                                 kind=v["kind"], detail=v["detail"])
        for i in ids:
            if agents[i].stats.fallbacks:
                events.log_event("solver_fallback", sc.name, mode.label, run_id, i,
                                 count=agents[i].stats.fallbacks)

    metrics = RunMetrics(
        run_id=run_id,
        seed=run_seed,
        mode=mode.label,
        steps=steps,
        costs=costs,
        step_times=step_times,
        min_distance=min_d,
        max_distance=max_d,
        final_excess={i: (excess[i][-1] if excess[i] else 0.0) for i in ids},
        settled_since={i: _settled_since(np.array(excess[i])) for i in ids},
        nominal_distance=nominal_distance,
        violations=records,
        acceptance={i: agents[i].stats.acceptance_rate for i in ids},
        stats={i: agents[i].stats.to_dict() for i in ids},
        bus=bus.counters(),
        reference_checks=steps,
        reference_failures=ref_failures,
        trajectory=np.array(rows) if rows else np.zeros((0, len(_columns(specs)))),
        columns=_columns(specs),
    )
    if record_events:
        events.log_event("run_finished", sc.name, mode.label, run_id, seed=run_seed,
                         costs=metrics.to_dict()["costs"], violations=len(records))
    logger.info("run %d (%s): costs %s, mean step %.4fs, %d violation(s)", run_id, mode.label,
                {i: round(c, 2) for i, c in costs.items()}, metrics.mean_step_time, len(records))
    return metrics


def simulate(initialization: Initialization, mode: ControllerMode, seed: int = 0, runs: int = 1,
             workers: int = 1, **kwargs: Any) -> list[RunMetrics]:
    """Monte-Carlo batch; run ``r`` uses the ``r``-th child of the master seed."""
    if runs < 1:
        raise ScenarioError("runs must be at least 1")
    seqs = np.random.SeedSequence(seed).spawn(runs)
    if workers <= 1:
        return [simulate_run(initialization, mode, r, seqs[r], **kwargs) for r in range(runs)]
    if runs == 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return [simulate_run(initialization, mode, 0, seqs[0], executor=pool, **kwargs)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(simulate_run, initialization, mode, r, seqs[r], **kwargs) for r in range(runs)]
        results = [f.result() for f in futures]
    return sorted(results, key=lambda m: m.run_id)


# ---------------------------------------------------------------------------
# Aggregation and persistence
# ---------------------------------------------------------------------------

def mean_costs(metrics: Sequence[RunMetrics]) -> dict[int, float]:
    ids = sorted(metrics[0].costs)
    return {i: float(np.mean([m.costs[i] for m in sorted(metrics, key=lambda m: m.run_id)])) for i in ids}


def summarize(metrics: Sequence[RunMetrics]) -> dict[str, Any]:
    """Means over the runs of a batch."""
    ordered = sorted(metrics, key=lambda m: m.run_id)
    steps = [t for m in ordered for t in m.step_times]
    mins = [min(m.min_distance) for m in ordered if m.min_distance]
    maxs = [max(m.max_distance) for m in ordered if m.max_distance]
    return {
        "runs": len(ordered),
        "mean_costs": {str(i): c for i, c in mean_costs(ordered).items()},
        "mean_step_time": float(np.mean(steps)) if steps else 0.0,
        "min_distance": min(mins) if mins else None,
        "max_distance": max(maxs) if maxs else None,
        "infeasible": sum(m.infeasible for m in ordered),
        "violations": sum(len(m.violations) for m in ordered),
    }


def run_stem(scenario: str, mode: str, seed: int) -> str:
    return f"{scenario}_{mode}_{seed}"


def write_trajectory(path: Union[str, Path], metrics: RunMetrics) -> Path:
    """Plot-ready CSV with one row per (k, agent)."""
    path = Path(path)
    np.savetxt(path, metrics.trajectory, delimiter=",", header=",".join(metrics.columns), comments="",
               fmt="%.17g")
    return path


def write_results(out_dir: Union[str, Path], scenario: str, mode: str, seed: int,
                  metrics: Sequence[RunMetrics], settings: Optional[dict[str, Any]] = None) -> list[Path]:
    """One trajectory CSV per run and one metrics JSON for the batch."""
    out = Path(out_dir).expanduser()
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for m in sorted(metrics, key=lambda m: m.run_id):
        written.append(write_trajectory(out / f"{run_stem(scenario, mode, m.seed)}.csv", m))
    path = out / f"{run_stem(scenario, mode, seed)}_metrics.json"
    with open(path, "w") as f:
        json.dump({
            "scenario": scenario,
            "mode": mode,
            "seed": seed,
            "settings": settings or {},
            "summary": summarize(metrics),
            "runs": [m.to_dict() for m in sorted(metrics, key=lambda m: m.run_id)],
        }, f, indent=2)
    written.append(path)
    return written


def recompute_costs(path: Union[str, Path], specs: dict[int, SubsystemSpec]) -> dict[int, float]:
    """Actual cost per agent from a persisted trajectory CSV."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    spec = next(iter(specs.values()))
    n, m = spec.state_dim, spec.input_dim
    costs = {i: 0.0 for i in specs}
    for row in data:
        i = int(row[1])
        x = row[2:2 + n]
        u = row[2 + 3 * n:2 + 3 * n + m]
        costs[i] += float(specs[i].stage_cost(x, u))
    return costs


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

@dataclass
class Comparison:
    scenario: str
    baseline: str
    rows: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"scenario": self.scenario, "baseline": self.baseline, "rows": list(self.rows)}

    def ratio(self, mode: str, agent: int) -> float:
        for row in self.rows:
            if row["mode"] == mode and row["agent"] == agent:
                return row["ratio"]
        raise KeyError((mode, agent))

    def step_time(self, mode: str) -> float:
        return next(row["mean_step_time"] for row in self.rows if row["mode"] == mode)


def compare(initialization: Initialization, modes: Sequence[ControllerMode], seed: int = 0, runs: int = 1,
            workers: int = 1, **kwargs: Any) -> tuple[Comparison, dict[str, list[RunMetrics]]]:
    """Mean actual cost per mode and agent, normalized by the proposed mode."""
    if not modes:
        raise ScenarioError("compare needs at least one mode")
    batches: dict[str, list[RunMetrics]] = {}
    for mode in modes:
        batches[mode.label] = simulate(initialization, mode, seed, runs, workers, **kwargs)
    labels = list(batches)
    baseline = "proposed" if "proposed" in batches else labels[0]
    base = mean_costs(batches[baseline])
    rows = []
    for label in labels:
        costs = mean_costs(batches[label])
        step_time = summarize(batches[label])["mean_step_time"]
        for i, c in costs.items():
            ratio = c / base[i] if base[i] > 0 else (1.0 if c == 0 else float("inf"))
            rows.append({"mode": label, "agent": i, "mean_cost": c, "ratio": ratio, "mean_step_time": step_time})
    return Comparison(initialization.scenario.name, baseline, rows), batches


def write_comparison(out_dir: Union[str, Path], comparison: Comparison, seed: int) -> list[Path]:
    out = Path(out_dir).expanduser()
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{comparison.scenario}_compare_{seed}"
    table = np.array([[r["mode"], r["agent"], f"{r['mean_cost']:.10g}", f"{r['ratio']:.6f}",
                       f"{r['mean_step_time']:.6g}"] for r in comparison.rows], dtype=object)
    csv_path = out / f"{stem}.csv"
    np.savetxt(csv_path, table, delimiter=",", fmt="%s", header="mode,agent,mean_cost,ratio,mean_step_time",
               comments="")
    json_path = out / f"{stem}.json"
    with open(json_path, "w") as f:
        json.dump(comparison.to_dict(), f, indent=2)
    return [csv_path, json_path]
