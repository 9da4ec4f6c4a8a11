"""Agents, synchronous message rounds and one closed-loop time step per controller mode."""

import logging
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from tubedmpc.coupling import CouplingGraph, tightening_scalars
from tubedmpc.errors import DeadlockError, ScenarioError, TheoremViolation, TubeDmpcError
from tubedmpc.ocp import (
    LocalOCP,
    LocalSolver,
    Obstacle,
    OcpResult,
    TrajectoryWindow,
    apply_control,
    build_candidate,
    window_cost,
)
from tubedmpc.refupdate import reference_update, tentative_reference
from tubedmpc.subsystem import SubsystemSpec

logger = logging.getLogger(__name__)

COST_DESCENT_TOL = 1e-6
MODE_KINDS = ("proposed", "fixedref", "sequential")


# ---------------------------------------------------------------------------
# Modes and messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerMode:
    kind: str = "proposed"
    iterations: int = 1
    order: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ScenarioError(f"unknown controller mode {self.kind!r}; expected one of {', '.join(MODE_KINDS)}")
        if self.iterations < 1:
            raise ScenarioError("iterations must be at least 1")
        if self.kind != "proposed" and self.iterations != 1:
            raise ScenarioError("iterations only apply to the proposed mode")

    @classmethod
    def proposed(cls, iterations: int = 1) -> "ControllerMode":
        return cls("proposed", iterations)

    @classmethod
    def fixed_reference(cls) -> "ControllerMode":
        return cls("fixedref")

    @classmethod
    def sequential(cls, order: Sequence[int]) -> "ControllerMode":
        return cls("sequential", 1, tuple(order))

    @property
    def label(self) -> str:
        if self.kind == "proposed":
            return "proposed" if self.iterations == 1 else f"proposed-it{self.iterations}"
        return "fixed-reference" if self.kind == "fixedref" else "sequential-direct"

    def resolved(self, agents: Iterable[int]) -> "ControllerMode":
        """Fill in and validate the sequential order for the given agents."""
        agents = sorted(agents)
        if self.kind != "sequential":
            return self
        order = tuple(agents) if self.order is None else self.order
        if sorted(order) != agents:
            raise ScenarioError(f"sequential order {list(order)} must list every agent exactly once")
        return ControllerMode("sequential", 1, order)


@dataclass(frozen=True)
class RoundMessage:
    sender: int
    receiver: int
    k: int
    phase: str
    iteration: int
    payload: TrajectoryWindow

    @property
    def round_key(self) -> tuple[int, str, int]:
        return self.k, self.phase, self.iteration


@dataclass(frozen=True)
class LatencyModel:
    """Per-message delay ``constant + U(0, jitter)`` seconds; only affects recorded timing."""

    constant: float = 0.0
    jitter: float = 0.0

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if count == 0:
            return np.zeros(0)
        return self.constant + self.jitter * rng.uniform(size=count)


class MessageBus:
    """In-process neighbor-to-neighbor exchange with barrier delivery.

    Messages of a round are delivered only when every expected message has
    been posted; the delivery order is shuffled but results are keyed by
    sender, so it never affects what an agent reads.
    """

    def __init__(self, graph: CouplingGraph, rng: Optional[np.random.Generator] = None,
                 latency: Optional[LatencyModel] = None):
        self.graph = graph
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.latency = latency or LatencyModel()
        self._pending: dict[tuple, dict[tuple[int, int], RoundMessage]] = {}
        self.posted: dict[str, int] = {}
        self.delivered: dict[str, int] = {}
        self.latency_total = 0.0

    def post(self, msg: RoundMessage) -> None:
        box = self._pending.setdefault(msg.round_key, {})
        if (msg.sender, msg.receiver) in box:
            raise TubeDmpcError(f"duplicate message {msg.sender}->{msg.receiver} in round {msg.round_key}")
        if msg.payload.k != msg.k:
            raise TubeDmpcError(f"message from agent {msg.sender} anchored at {msg.payload.k}, round at {msg.k}")
        box[(msg.sender, msg.receiver)] = msg
        self.posted[msg.phase] = self.posted.get(msg.phase, 0) + 1

    def broadcast(self, sender: int, k: int, phase: str, iteration: int, payload: TrajectoryWindow) -> None:
        for j in self.graph.neighbors(sender):
            self.post(RoundMessage(sender, j, k, phase, iteration, payload))

    def deliver(self, k: int, phase: str, iteration: int = 0) -> dict[int, dict[int, TrajectoryWindow]]:
        """Barrier: every agent's inbox for the round, keyed by sender."""
        key = (k, phase, iteration)
        box = self._pending.pop(key, {})
        for i in self.graph.agents:
            for j in self.graph.neighbors(i):
                if (j, i) not in box:
                    raise DeadlockError(j, i, key)
        inbox: dict[int, dict[int, TrajectoryWindow]] = {i: {} for i in self.graph.agents}
        messages = list(box.values())
        for pos in self.rng.permutation(len(messages)):
            msg = messages[pos]
            inbox[msg.receiver][msg.sender] = msg.payload
        delays = self.latency.sample(self.rng, len(messages))
        if delays.size:
            self.latency_total += float(delays.max())
        self.delivered[phase] = self.delivered.get(phase, 0) + len(messages)
        if messages:
            logger.debug("round %s: delivered %d messages", key, len(messages))
        return inbox

    def counters(self) -> dict[str, Any]:
        return {"posted": dict(self.posted), "delivered": dict(self.delivered), "latency": self.latency_total}


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

@dataclass
class AgentStats:
    solves: int = 0
    sqp_iterations: int = 0
    fallbacks: int = 0
    infeasible: int = 0
    recovered: int = 0
    accepted: int = 0
    checked: int = 0
    solve_time: float = 0.0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.checked if self.checked else 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "solves": self.solves,
            "sqp_iterations": self.sqp_iterations,
            "fallbacks": self.fallbacks,
            "infeasible": self.infeasible,
            "recovered": self.recovered,
            "acceptance_rate": self.acceptance_rate,
            "solve_time": self.solve_time,
        }


class Agent:
    """One subsystem: its local solver, current reference and last optimal window."""

    def __init__(self, spec: SubsystemSpec, graph: CouplingGraph, horizon: int, ref: TrajectoryWindow,
                 init: TrajectoryWindow, solver: str = "CLARABEL"):
        self.spec = spec
        self.id = spec.agent
        self.graph = graph
        self.horizon = horizon
        self.ref = ref
        self.init = init
        self.optimal: Optional[TrajectoryWindow] = None
        self.solver = LocalSolver(spec, horizon, solver)
        self.stats = AgentStats()
        self.local = tuple((c, tightening_scalars(c, {self.id: spec.tube.P})) for c in graph.local_of(self.id))

    def warm_start(self, k: int) -> TrajectoryWindow:
        """Candidate from the previous optimum, or the initial window at the first step."""
        if self.optimal is None:
            return self.init
        if self.optimal.k != k - 1:
            raise TubeDmpcError(f"agent {self.id}: optimal window from k={self.optimal.k} cannot warm-start k={k}")
        return build_candidate(self.optimal, self.spec.terminal, self.spec.dyn)

    def problem(self, x: np.ndarray, k: int, ref: Optional[TrajectoryWindow],
                obstacles: tuple[Obstacle, ...] = ()) -> LocalOCP:
        C_bar = self.spec.consistency.C_bar if ref is not None else None
        return LocalOCP(self.spec, self.horizon, x, k, ref, C_bar, local=self.local, obstacles=obstacles)

    def solve(self, x: np.ndarray, k: int, ref: Optional[TrajectoryWindow], warm: TrajectoryWindow,
              obstacles: tuple[Obstacle, ...] = ()) -> OcpResult:
        result = self.solver.solve(self.problem(x, k, ref, obstacles), warm)
        self.stats.solves += 1
        self.stats.sqp_iterations += result.iterations
        self.stats.solve_time += result.solve_time
        if result.fallback:
            self.stats.fallbacks += 1
        if not result.feasible:
            self.stats.infeasible += 1
        return result


# ---------------------------------------------------------------------------
# Time step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    k: int
    solutions: dict[int, TrajectoryWindow]
    inputs: dict[int, np.ndarray]
    refs: dict[int, TrajectoryWindow]
    costs: dict[int, float]
    step_time: float
    agent_times: dict[int, float]
    violations: list[TheoremViolation] = field(default_factory=list)


class _Serial:
    def map(self, fn: Callable, items: Iterable) -> Iterable:
        return map(fn, items)


def _record(violations: list, strict: bool, exc: TheoremViolation) -> None:
    if strict:
        raise exc
    logger.warning("%s", exc)
    violations.append(exc)


def _check_result(agent: Agent, result: OcpResult, warm: TrajectoryWindow, k: int, guaranteed: bool,
                  strict: bool, violations: list) -> None:
    """Infeasibility is only raised where recursive feasibility is guaranteed."""
    if not result.feasible:
        worst = {n: v for n, v in result.violations.items() if v > 1e-6}
        _record(violations, strict and guaranteed, TheoremViolation("ocp_infeasible", agent.id, k, worst))
        return
    if guaranteed and agent.optimal is not None:
        bound = window_cost(agent.spec, warm)
        if result.cost > bound + COST_DESCENT_TOL:
            _record(violations, strict, TheoremViolation(
                "cost_increase", agent.id, k, f"{result.cost:.6g} > candidate {bound:.6g}"))


def run_time_step(agents: Mapping[int, Agent], states: Mapping[int, np.ndarray], k: int, mode: ControllerMode,
                  bus: MessageBus, executor: Optional[Executor] = None, strict: bool = False) -> StepResult:
    """Compute the inputs of all agents at time ``k`` and their references for ``k+1``."""
    pool = executor or _Serial()
    ids = sorted(agents)
    violations: list[TheoremViolation] = []

    warm = {}
    for i in ids:
        try:
            warm[i] = agents[i].warm_start(k)
        except TheoremViolation as exc:
            _record(violations, strict, TheoremViolation(exc.kind, i, k, exc.detail))
            warm[i] = build_candidate(agents[i].optimal, agents[i].spec.terminal, agents[i].spec.dyn, check=False)

    if mode.kind == "sequential":
        results, step_time, agent_times = _sequential(agents, states, k, mode, warm, strict, violations)
        refs = {}
        for i in ids:
            refs[i] = reference_update(agents[i].spec, results[i].window, agents[i].ref, {}, {}, {}, agents[i].graph,
                                       policy="always").window
    else:
        results, refs, step_time, agent_times = _parallel(agents, states, k, mode, warm, bus, pool, strict,
                                                          violations)

    solutions = {i: results[i].window for i in ids}
    inputs = {}
    for i in ids:
        try:
            inputs[i] = apply_control(states[i], solutions[i], agents[i].spec.tube)
        except TheoremViolation as exc:
            _record(violations, strict, TheoremViolation(exc.kind, i, k, exc.detail))
            x_hat, u_hat = solutions[i].states[0], solutions[i].inputs[0]
            inputs[i] = u_hat + agents[i].spec.tube.aux(np.asarray(states[i], float), x_hat, u_hat)
    for i in ids:
        agents[i].optimal = solutions[i]
        agents[i].ref = refs[i]
    return StepResult(k, solutions, inputs, refs, {i: results[i].cost for i in ids}, step_time, agent_times,
                      violations)


def _parallel(agents: Mapping[int, Agent], states: Mapping[int, np.ndarray], k: int, mode: ControllerMode,
              warm: dict[int, TrajectoryWindow], bus: MessageBus, pool: Any, strict: bool,
              violations: list) -> tuple[dict, dict, float, dict]:
    ids = sorted(agents)
    refs = {i: agents[i].ref for i in ids}
    guaranteed = mode.kind == "proposed"
    step_time = 0.0
    latency_start = bus.latency_total
    agent_times = {i: 0.0 for i in ids}
    results: dict[int, OcpResult] = {}

    for it in range(mode.iterations):
        def solve(i: int) -> tuple[int, OcpResult]:
            return i, agents[i].solve(states[i], k, refs[i], warm[i])

        results = dict(pool.map(solve, ids))
        for i in ids:
            _check_result(agents[i], results[i], warm[i], k, guaranteed, strict, violations)
            agent_times[i] += results[i].solve_time
        step_time += max(r.solve_time for r in results.values())
        for i in ids:
            bus.broadcast(i, k, "predicted", it, results[i].window)
        predicted = bus.deliver(k, "predicted", it)

        if it < mode.iterations - 1:
            started = time.perf_counter()

            def tentative(i: int) -> tuple[int, Any]:
                upd = tentative_reference(agents[i].spec, results[i].window, refs[i], predicted[i],
                                          {j: refs[j] for j in predicted[i]}, _sets(agents), agents[i].graph)
                return i, upd

            updates = dict(pool.map(tentative, ids))
            for i in ids:
                bus.broadcast(i, k, "reference", it, updates[i].window)
            bus.deliver(k, "reference", it)
            refs = {i: updates[i].window for i in ids}
            warm = {i: results[i].window for i in ids}
            step_time += time.perf_counter() - started

    started = time.perf_counter()
    policy = "conditional" if mode.kind == "proposed" else "always"

    def update(i: int) -> tuple[int, Any]:
        inbox = predicted[i]
        return i, reference_update(agents[i].spec, results[i].window, refs[i], inbox,
                                   {j: refs[j] for j in inbox}, _sets(agents), agents[i].graph, policy)

    updates = dict(pool.map(update, ids))
    for i in ids:
        agents[i].stats.accepted += int(updates[i].accepted.sum())
        agents[i].stats.checked += int(updates[i].accepted.size)
        bus.broadcast(i, k + 1, "reference", 0, updates[i].window)
    bus.deliver(k + 1, "reference", 0)
    step_time += time.perf_counter() - started
    step_time += bus.latency_total - latency_start
    return results, {i: updates[i].window for i in ids}, step_time, agent_times


def _sets(agents: Mapping[int, Agent]) -> dict:
    return {i: a.spec.consistency for i, a in agents.items()}


def _sequential(agents: Mapping[int, Agent], states: Mapping[int, np.ndarray], k: int, mode: ControllerMode,
                warm: dict[int, TrajectoryWindow], strict: bool, violations: list) -> tuple[dict, float, dict]:
    """Agents solve one after another with coupled constraints imposed directly.

    Neighbors that already solved contribute their fresh windows, the others
    their candidate windows; the margin covers both tubes.
    """
    fresh: dict[int, TrajectoryWindow] = {}
    results: dict[int, OcpResult] = {}
    agent_times = {}
    for i in mode.order:
        agent = agents[i]
        obstacles = []
        for c in agent.graph.coupled_of(i):
            fixed = {p: (fresh[p] if p in fresh else warm[p]).states for p in c.participants if p != i}
            nu = tightening_scalars(c, {p: agents[p].spec.tube.P for p in c.participants})
            obstacles.append(Obstacle(c, fixed, nu))
        result = agent.solve(states[i], k, None, warm[i], tuple(obstacles))
        if not result.feasible:
            agent.stats.recovered += 1
            logger.warning("agent %d at k=%d: sequential problem infeasible, using candidate", i, k)
            violations.append(TheoremViolation("sequential_recovered", i, k, result.status))
            result = OcpResult(warm[i], window_cost(agent.spec, warm[i]), "recovered", result.iterations,
                               feasible=False, fallback=True, solve_time=result.solve_time)
        results[i] = result
        fresh[i] = result.window
        agent_times[i] = result.solve_time
    return results, float(sum(agent_times.values())), agent_times
