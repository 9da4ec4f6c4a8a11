"""Consistency sets, reference trajectory updates and initially feasible trajectories.

Consistency sets live in the consistency coordinates of an agent (the planar
position for the omni robot): ``C_hat`` is a ball of radius ``min(alpha,
beta)``, ``C = C_hat + proj(P)`` and ``C_bar`` is the box handed to the local
solver. Coupled constraints may only depend on these coordinates; state
constraints of an agent are additionally imposed directly in its local problem.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from tubedmpc.coupling import ConstraintSpec, CouplingGraph, eval_constraint, tightening_scalars
from tubedmpc.errors import DimensionMismatch, InitializationError
from tubedmpc.ocp import (
    FEAS_TOL,
    AgentBlock,
    CoupledTerm,
    TrajectoryWindow,
    problem_blocks,
    run_sqp,
    track_path,
)
from tubedmpc.setgeom import (
    Ball,
    Box,
    EmptySet,
    SetDescriptor,
    as_hpolytope,
    max_point_distance,
    minkowski_sum,
    pontryagin_diff,
    project,
    support,
)
from tubedmpc.subsystem import SubsystemSpec

logger = logging.getLogger(__name__)

INIT_MAX_ITERATIONS = 40
GUESS_STYLES = ("straight", "clockwise", "counterclockwise")
MARGIN_TOL = 1e-9


# ---------------------------------------------------------------------------
# Consistency sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConsistencySets:
    """``C_hat``, ``C`` and ``C_bar`` of one agent in its consistency coordinates."""

    C_hat: Ball
    C: SetDescriptor
    C_bar: Box
    alpha: float
    beta: float
    indices: tuple[int, ...]
    P: SetDescriptor = field(repr=False)

    @property
    def radius(self) -> float:
        return float(self.C_hat.radius)

    @property
    def eta(self) -> float:
        """Largest distance of ``C`` from the origin, ``radius + d_max(0, proj P)``."""
        p_proj = project(self.P, self.indices)
        return self.radius + max_point_distance(np.zeros(len(self.indices)), p_proj)

    def summands(self) -> tuple[SetDescriptor, SetDescriptor]:
        """Full-dimensional summands ``(B_r, P)`` of ``C`` for tightening margins."""
        return Ball.origin(self.P.dim, self.radius), self.P

    def to_dict(self) -> dict[str, Any]:
        return {
            "indices": list(self.indices),
            "alpha": self.alpha,
            "beta": self.beta,
            "C_hat_radius": self.radius,
            "C_bar_halfwidths": self.C_bar.halfwidths.tolist(),
            "eta": self.eta,
        }


def consistency_sets(spec: SubsystemSpec, c_bar: Optional[float] = None) -> ConsistencySets:
    """``C_hat = B_min(alpha, beta)``, ``C = C_hat + P`` and the inner box ``C_bar``.

    ``c_bar`` defaults to the largest box inscribed in ``C_hat``.
    """
    idx = spec.consistency_indices
    radius = min(spec.alpha, spec.beta)
    if radius <= 0:
        raise InitializationError(5, f"agent {spec.agent}: alpha and beta must be positive")
    C_hat = Ball.origin(len(idx), radius)
    C = minkowski_sum(C_hat, project(spec.tube.P, idx))
    if c_bar is None:
        c_bar = radius / math.sqrt(len(idx))
    if c_bar <= 0 or c_bar * math.sqrt(len(idx)) > radius + 1e-12:
        raise InitializationError(
            5, f"agent {spec.agent}: consistency box c_bar={c_bar:.6g} is not inside the ball of radius {radius:.6g}")
    C_bar = Box.symmetric([c_bar] * len(idx))
    return ConsistencySets(C_hat, C, C_bar, spec.alpha, spec.beta, idx, spec.tube.P)


def check_consistency_coordinates(graph: CouplingGraph, specs: Mapping[int, SubsystemSpec]) -> None:
    """Coupled constraints must only read the participants' consistency coordinates."""
    for c in graph.constraints:
        if not c.coupled:
            continue
        for offset, p in _blocks(c, specs):
            idx = set(specs[p].consistency_indices)
            n = specs[p].state_dim
            if c.kind == "affine":
                outside = [col for col in range(n) if col not in idx]
                if np.any(c.A[:, [offset + col for col in outside]] != 0):
                    raise InitializationError(5, f"{c.label} depends on non-consistency states of agent {p}")
            elif c.indices is None or not set(c.indices) <= idx:
                raise InitializationError(5, f"{c.label} depends on non-consistency states of agent {p}")


def _blocks(c: ConstraintSpec, specs: Mapping[int, SubsystemSpec]) -> list[tuple[int, int]]:
    out, offset = [], 0
    for p in c.participants:
        out.append((offset, p))
        offset += specs[p].state_dim
    return out


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------

def state_condition_margins(spec: SubsystemSpec, sets: ConsistencySets, local: Sequence[ConstraintSpec],
                            states: np.ndarray) -> np.ndarray:
    """Worst margin per state of ``h(x) <= 0`` for all ``x`` in ``state + C``.

    Rows of the state set are shifted exactly by support functions; local
    nonlinear constraints use their Lipschitz surrogate.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    margins = np.full(states.shape[0], -np.inf)
    idx = list(sets.indices)
    if spec.X is not None:
        H = as_hpolytope(spec.X)
        shift = np.array([sets.radius * np.linalg.norm(a[idx]) + support(sets.P, a) for a in H.A])
        margins = np.maximum(margins, np.max(states @ H.A.T + shift - H.b, axis=1))
    for c in local:
        nu = tightening_scalars(c, {spec.agent: sets.summands()})
        values = np.asarray(eval_constraint(c, {spec.agent: states})).reshape(states.shape[0], -1)
        margins = np.maximum(margins, np.max(values + nu, axis=1))
    return margins


def coupled_condition_margins(c: ConstraintSpec, agent: int, own: np.ndarray,
                              choices: Mapping[int, Sequence[np.ndarray]],
                              sets: Mapping[int, ConsistencySets]) -> np.ndarray:
    """Worst margin per time of ``c`` over ``own + C`` and every neighbor choice inflated by ``C``.

    ``choices`` gives, per other participant, the candidate windows (its
    predicted states and its previous references).
    """
    nu = tightening_scalars(c, {p: sets[p].summands() for p in c.participants})
    others = [p for p in c.participants if p != agent]
    margins = np.full(own.shape[0], -np.inf)
    for combo in itertools.product(*(choices[p] for p in others)):
        states = {agent: own}
        states.update(zip(others, combo))
        values = np.asarray(eval_constraint(c, states)).reshape(own.shape[0], -1)
        margins = np.maximum(margins, np.max(values + nu, axis=1))
    return margins


def _condition_mask(spec: SubsystemSpec, sets: Mapping[int, ConsistencySets], graph: CouplingGraph,
                    own: np.ndarray, neighbor_optimal: Mapping[int, np.ndarray],
                    neighbor_ref: Mapping[int, np.ndarray]) -> np.ndarray:
    i = spec.agent
    worst = state_condition_margins(spec, sets[i], graph.local_of(i), own)
    for c in graph.coupled_of(i):
        choices = {p: (neighbor_optimal[p], neighbor_ref[p]) for p in c.participants if p != i}
        worst = np.maximum(worst, coupled_condition_margins(c, i, own, choices, sets))
    return worst <= MARGIN_TOL


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

@dataclass
class ReferenceUpdate:
    window: TrajectoryWindow
    accepted: np.ndarray

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else 1.0


def _slice(window: TrajectoryWindow, start: int, count: int) -> np.ndarray:
    j = start - window.k
    return window.states[j:j + count]


def reference_update(spec: SubsystemSpec, optimal: TrajectoryWindow, prev_ref: TrajectoryWindow,
                     neighbor_optimal: Mapping[int, TrajectoryWindow],
                     neighbor_prev_ref: Mapping[int, TrajectoryWindow],
                     sets: Mapping[int, ConsistencySets], graph: CouplingGraph,
                     policy: str = "conditional") -> ReferenceUpdate:
    """Reference window for ``k+1`` from the optimal window and the reference at ``k``.

    For ``kappa = k+1 .. k+N-1`` the predicted state replaces the previous
    reference state only if the state and coupled conditions hold; the
    entry for ``k+N`` is always the predicted one. ``policy="always"``
    accepts every state (fixed-reference baseline), ``"never"`` keeps every
    previous state.
    """
    k = optimal.k
    N = optimal.inputs.shape[0]
    if prev_ref.k != k:
        raise DimensionMismatch(f"reference anchored at {prev_ref.k}, optimal window at {k}")
    own = _slice(optimal, k + 1, N - 1)
    previous = _slice(prev_ref, k + 1, N - 1)
    if policy == "always":
        accepted = np.ones(N - 1, dtype=bool)
    elif policy == "never":
        accepted = np.zeros(N - 1, dtype=bool)
    else:
        opt_n = {j: _slice(w, k + 1, N - 1) for j, w in neighbor_optimal.items()}
        ref_n = {j: _slice(w, k + 1, N - 1) for j, w in neighbor_prev_ref.items()}
        accepted = _condition_mask(spec, sets, graph, own, opt_n, ref_n)
    states = np.where(accepted[:, None], own, previous)
    states = np.vstack([states, optimal.states[N]])
    if not accepted.all():
        logger.debug("agent %d at k=%d: kept %d previous reference states", spec.agent, k, int((~accepted).sum()))
    return ReferenceUpdate(TrajectoryWindow(k + 1, states), accepted)


def tentative_reference(spec: SubsystemSpec, optimal: TrajectoryWindow, ref: TrajectoryWindow,
                        neighbor_optimal: Mapping[int, TrajectoryWindow],
                        neighbor_ref: Mapping[int, TrajectoryWindow],
                        sets: Mapping[int, ConsistencySets], graph: CouplingGraph) -> ReferenceUpdate:
    """Reference for re-solving at the same time ``k`` (iterative scheme).

    Every ``kappa = k .. k+N-1`` takes the predicted state where the
    conditions hold and keeps the current reference state otherwise.
    """
    k = optimal.k
    N = ref.states.shape[0]
    own = _slice(optimal, k, N)
    opt_n = {j: _slice(w, k, N) for j, w in neighbor_optimal.items()}
    ref_n = {j: _slice(w, k, N) for j, w in neighbor_ref.items()}
    accepted = _condition_mask(spec, sets, graph, own, opt_n, ref_n)
    states = np.where(accepted[:, None], own, ref.states)
    return ReferenceUpdate(TrajectoryWindow(k, states), accepted)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class ReferenceReport:
    k: int
    state_margin: float = -np.inf
    coupled_margin: float = -np.inf
    consistency_margin: float = -np.inf
    failures: list[str] = field(default_factory=list)
    methods: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "passed": self.passed,
            "state_margin": self.state_margin,
            "coupled_margin": self.coupled_margin,
            "consistency_margin": self.consistency_margin,
            "failures": list(self.failures),
            "methods": dict(self.methods),
        }


def validate_references(refs: Mapping[int, TrajectoryWindow], specs: Mapping[int, SubsystemSpec],
                         graph: CouplingGraph, previous_optimal: Optional[Mapping[int, TrajectoryWindow]] = None
                         ) -> ReferenceReport:
    """Check that references imply all constraints and contain the previous predictions.

    Constraint implication is checked on every reference state through the
    surrogate margins. With ``previous_optimal`` (the optimal windows of the
    previous step) each predicted state must lie in ``ref + C_hat``.
    """
    k = next(iter(refs.values())).k
    report = ReferenceReport(k)
    sets = {i: specs[i].consistency for i in specs}
    for i, spec in specs.items():
        local = graph.local_of(i)
        m = float(np.max(state_condition_margins(spec, sets[i], local, refs[i].states)))
        report.state_margin = max(report.state_margin, m)
        if m > MARGIN_TOL:
            report.failures.append(f"agent {i}: reference violates local constraints by {m:.3g}")
    for c in graph.constraints:
        if not c.coupled:
            continue
        report.methods[c.label] = "support" if c.kind == "affine" else "lipschitz"
        nu = tightening_scalars(c, {p: sets[p].summands() for p in c.participants})
        values = np.asarray(eval_constraint(c, {p: refs[p].states for p in c.participants}))
        m = float(np.max(values.reshape(refs[c.participants[0]].states.shape[0], -1) + nu))
        report.coupled_margin = max(report.coupled_margin, m)
        if m > MARGIN_TOL:
            report.failures.append(f"{c.label}: references violate the constraint by {m:.3g}")
    if previous_optimal is not None:
        for i, ref in refs.items():
            prev = previous_optimal[i]
            idx = list(sets[i].indices)
            count = ref.states.shape[0]
            dist = np.linalg.norm(_slice(prev, k, count)[:, idx] - ref.states[:, idx], axis=1)
            m = float(np.max(dist) - sets[i].radius)
            report.consistency_margin = max(report.consistency_margin, m)
            if m > 1e-7:
                report.failures.append(f"agent {i}: previous prediction leaves ref + C_hat by {m:.3g}")
    return report


# ---------------------------------------------------------------------------
# Initially feasible trajectories
# ---------------------------------------------------------------------------

def _polar_path(start: np.ndarray, end: np.ndarray, center: np.ndarray, sweep: str, s: np.ndarray) -> np.ndarray:
    d0, d1 = start - center, end - center
    r0, r1 = np.linalg.norm(d0), np.linalg.norm(d1)
    if r0 < 1e-9 or r1 < 1e-9:
        return start + s[:, None] * (end - start)
    th0, th1 = math.atan2(d0[1], d0[0]), math.atan2(d1[1], d1[0])
    delta = (th1 - th0) % (2 * math.pi)
    if sweep == "clockwise" and delta > 0:
        delta -= 2 * math.pi
    theta = th0 + s * delta
    radius = r0 + s * (r1 - r0)
    return center + np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def initial_guess(spec: SubsystemSpec, horizon: int, style: str = "straight",
                  center: Optional[np.ndarray] = None) -> TrajectoryWindow:
    """Dynamically consistent guess that follows a straight or circular path to ``xi``."""
    if style not in GUESS_STYLES:
        raise InitializationError(4, f"unknown initial guess {style!r}")
    s = np.arange(horizon + 1) / horizon
    path = spec.x0 + s[:, None] * (spec.xi - spec.x0)
    idx = list(spec.consistency_indices)
    if style != "straight" and len(idx) == 2:
        c = np.zeros(2) if center is None else np.asarray(center, dtype=float)
        path[:, idx] = _polar_path(spec.x0[idx], spec.xi[idx], c, style, s)
    return track_path(spec.dyn, spec.x0, path, spec.u_xi, spec.tube.U_hat)


def init_state_set(spec: SubsystemSpec) -> Optional[SetDescriptor]:
    """``X`` tightened by ``P + B_beta``."""
    if spec.X is None:
        return None
    inflated = minkowski_sum(spec.tube.P, Ball.origin(spec.state_dim, spec.beta))
    tightened = pontryagin_diff(spec.X, inflated)
    if isinstance(tightened, EmptySet):
        raise InitializationError(4, f"agent {spec.agent}: state set is empty after tightening by P + B_beta")
    return tightened


def compute_initial_trajectories(specs: Mapping[int, SubsystemSpec], graph: CouplingGraph, horizon: int,
                                 objective: str = "effort", guess: str = "straight",
                                 solver: str = "CLARABEL", max_iter: int = INIT_MAX_ITERATIONS
                                 ) -> dict[int, TrajectoryWindow]:
    """Centralized problem over all agents for initially feasible trajectories.

    Every constraint holds on ``x_init + P + B_beta``, inputs lie in the
    tightened input set and each trajectory ends in its terminal set.
    """
    inflation = {i: (s.tube.P, Ball.origin(s.state_dim, s.beta)) for i, s in specs.items()}
    blocks = {}
    for i, spec in specs.items():
        local = [(c, tightening_scalars(c, {i: inflation[i]})) for c in graph.local_of(i)]
        blocks[i] = AgentBlock(spec, horizon, pin_initial=True, local=local,
                               state_set=init_state_set(spec), objective=objective)
        blocks[i].load(spec.x0)
    terms = [CoupledTerm(c, blocks, tightening_scalars(c, {p: inflation[p] for p in c.participants}), horizon)
             for c in graph.constraints if c.coupled]
    problem = problem_blocks(blocks.values(), terms)

    positions = [s.x0[list(s.consistency_indices)] for s in specs.values()]
    positions += [s.xi[list(s.consistency_indices)] for s in specs.values()]
    center = np.mean(positions, axis=0) if len({len(p) for p in positions}) == 1 else None
    start = {}
    for i, spec in specs.items():
        window = initial_guess(spec, horizon, guess, center)
        start[i] = (np.array(window.states), np.array(window.inputs))

    outcome = run_sqp(problem, blocks, terms, start, solver, max_iter)
    if not outcome.feasible:
        violated = sorted((v, name) for name, v in outcome.violations.items() if v > FEAS_TOL)
        names = ", ".join(f"{name} ({v:.3g})" for v, name in reversed(violated)) or outcome.status
        raise InitializationError(4, f"no initially feasible trajectories: violated {names}")
    logger.info("initial trajectories found after %d SQP iterations (cost %.4g)", outcome.iterations, outcome.cost)
    return {i: TrajectoryWindow(0, *outcome.points[i]) for i in specs}
