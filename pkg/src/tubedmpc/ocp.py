"""Local optimal control problems solved by SQP over a multiple-shooting transcription.

States and inputs of the horizon are decision variables and the RK4 dynamics
enter as linearized equality constraints. Every QP step is projected back onto
the nonlinear dynamics by a rollout from the (shifted) initial state, so all
returned windows are dynamically consistent. The best feasible iterate is kept
starting from the warm start, so a solve never ends worse than its warm start.

The QP of one agent is a DPP-compliant cvxpy problem: the linearization,
measured state, reference window and obstacle data are Parameters, and the
problem is compiled once per structure and reused across time steps.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

import cvxpy
import numpy as np

from tubedmpc.coupling import ConstraintSpec, eval_constraint, linearize_constraint
from tubedmpc.errors import DimensionMismatch, TheoremViolation
from tubedmpc.model import SubsystemDynamics
from tubedmpc.setgeom import Ball, Box, EmptySet, HPolytope, SetDescriptor, as_hpolytope, contains, violation
from tubedmpc.subsystem import SubsystemSpec
from tubedmpc.terminal import TerminalIngredients
from tubedmpc.tube import TubeIngredients

logger = logging.getLogger(__name__)

MAX_SQP_ITERATIONS = 15
STEP_TOL = 1e-7
FEAS_TOL = 1e-6
BACKTRACK = (1.0, 0.5, 0.25, 0.125, 0.0625)
DEFAULT_SOLVER = "CLARABEL"
CONIC_SOLVERS = ("CLARABEL", "ECOS", "SCS", "CVXOPT")


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrajectoryWindow:
    """States for times ``k, k+1, ...`` and, for predicted windows, the inputs."""

    k: int
    states: np.ndarray
    inputs: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim != 2:
            raise DimensionMismatch("window states must be a 2-D array")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        if self.inputs is not None:
            inputs = np.array(self.inputs, dtype=float)
            if inputs.ndim != 2 or inputs.shape[0] != states.shape[0] - 1:
                raise DimensionMismatch("a predicted window needs one input less than states")
            inputs.setflags(write=False)
            object.__setattr__(self, "inputs", inputs)

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1 if self.inputs is not None else self.states.shape[0]

    @property
    def times(self) -> range:
        return range(self.k, self.k + self.states.shape[0])

    def state_at(self, kappa: int) -> np.ndarray:
        j = kappa - self.k
        if not 0 <= j < self.states.shape[0]:
            raise IndexError(f"time {kappa} outside window starting at {self.k}")
        return self.states[j]

    def is_consistent(self, dyn: SubsystemDynamics, tol: float = 1e-8) -> bool:
        if self.inputs is None:
            return False
        for j, u in enumerate(self.inputs):
            if np.max(np.abs(dyn.step(self.states[j], u) - self.states[j + 1])) > tol:
                return False
        return True

    def reference(self, horizon: Optional[int] = None) -> "TrajectoryWindow":
        """The first ``horizon`` states as a reference window."""
        count = self.states.shape[0] - 1 if horizon is None else horizon
        return TrajectoryWindow(self.k, self.states[:count])

    def to_dict(self) -> dict[str, Any]:
        data = {"k": self.k, "states": self.states.tolist()}
        if self.inputs is not None:
            data["inputs"] = self.inputs.tolist()
        return data


def rollout(dyn: SubsystemDynamics, x0: Any, inputs: np.ndarray) -> np.ndarray:
    states = [np.asarray(x0, dtype=float)]
    for u in inputs:
        states.append(dyn.step(states[-1], u))
    return np.array(states)


# ---------------------------------------------------------------------------
# Problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Obstacle:
    """A coupled constraint imposed directly with other participants held fixed."""

    constraint: ConstraintSpec
    fixed: Mapping[int, np.ndarray]
    nu: Any = 0.0


@dataclass(frozen=True, eq=False)
class LocalOCP:
    """Data of one local problem at time ``k``.

    ``reference`` (``N`` states for ``k..k+N-1``) and ``C_bar`` (box in the
    consistency coordinates) define the consistency constraint; leaving them
    out drops it. ``local`` holds the agent's uncoupled constraints together
    with their tightening margins.
    """

    spec: SubsystemSpec
    horizon: int
    x_measured: np.ndarray
    k: int = 0
    reference: Optional[TrajectoryWindow] = None
    C_bar: Optional[Box] = None
    pin_initial: bool = False
    local: tuple[tuple[ConstraintSpec, Any], ...] = ()
    obstacles: tuple[Obstacle, ...] = ()
    objective: str = "tracking"

    def __post_init__(self):
        if self.horizon < 1:
            raise DimensionMismatch("horizon must be at least 1")
        if self.spec.terminal is None:
            raise DimensionMismatch(f"agent {self.spec.agent} has no terminal ingredients")
        if self.reference is not None:
            if self.C_bar is None:
                raise DimensionMismatch("a reference window needs a consistency box")
            if self.reference.states.shape[0] < self.horizon:
                raise DimensionMismatch("reference window shorter than the horizon")
            if self.reference.k != self.k:
                raise DimensionMismatch(f"reference anchored at {self.reference.k}, problem at {self.k}")
        object.__setattr__(self, "x_measured", np.asarray(self.x_measured, dtype=float))

    @property
    def state_set(self) -> Optional[SetDescriptor]:
        return self.spec.X_hat


@dataclass
class OcpResult:
    window: TrajectoryWindow
    cost: float
    status: str
    iterations: int = 0
    step_norm: float = 0.0
    feasible: bool = True
    fallback: bool = False
    violations: dict[str, float] = field(default_factory=dict)
    solve_time: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "cost": self.cost,
            "status": self.status,
            "iterations": self.iterations,
            "step_norm": self.step_norm,
            "feasible": self.feasible,
            "fallback": self.fallback,
            "solve_time": self.solve_time,
        }


# ---------------------------------------------------------------------------
# QP building blocks
# ---------------------------------------------------------------------------

def _set_constraints(expr: Any, S: SetDescriptor) -> list:
    """Rows of ``expr`` inside a box or polytope."""
    if isinstance(S, Box):
        return [expr >= S.lower, expr <= S.upper]
    if isinstance(S, HPolytope):
        return [expr @ S.A.T <= S.b]
    if isinstance(S, EmptySet):
        raise DimensionMismatch("constraint set is empty")
    raise DimensionMismatch(f"{type(S).__name__} sets are not supported as linear constraints")


def _chol(M: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(0.5 * (M + M.T))


class AgentBlock:
    """Variables, constraints and exact evaluation of one agent's horizon."""

    def __init__(self, spec: SubsystemSpec, horizon: int, *, pin_initial: bool = False,
                 with_reference: bool = False, C_bar: Optional[Box] = None,
                 local: Sequence[tuple[ConstraintSpec, Any]] = (),
                 state_set: Optional[SetDescriptor] = None, objective: str = "tracking"):
        if objective not in ("tracking", "effort"):
            raise DimensionMismatch(f"unknown objective {objective!r}")
        self.spec = spec
        self.agent = spec.agent
        self.N = N = horizon
        self.pin_initial = pin_initial
        self.with_reference = with_reference
        self.C_bar = C_bar
        self.local = tuple((c, np.atleast_1d(np.asarray(nu, dtype=float))) for c, nu in local)
        self.state_set = state_set
        self.objective = objective
        self.ti: TerminalIngredients = spec.terminal
        n, m = spec.state_dim, spec.input_dim
        self.idx = list(spec.consistency_indices)

        self.X = cvxpy.Variable((N + 1, n), name=f"x{self.agent}")
        self.U = cvxpy.Variable((N, m), name=f"u{self.agent}")
        self.A_par = [cvxpy.Parameter((n, n)) for _ in range(N)]
        self.B_par = [cvxpy.Parameter((n, m)) for _ in range(N)]
        self.c_par = [cvxpy.Parameter(n) for _ in range(N)]
        self.x_meas = cvxpy.Parameter(n)
        self.level_root = cvxpy.Parameter(nonneg=True)
        self.ref = cvxpy.Parameter((N, len(self.idx))) if with_reference else None
        self._x_meas = np.zeros(n)
        self._ref = None

        cons = [self.X[j + 1] == self.A_par[j] @ self.X[j] + self.B_par[j] @ self.U[j] + self.c_par[j]
                for j in range(N)]
        if pin_initial:
            cons.append(self.X[0] == self.x_meas)
        else:
            cons += _set_constraints(self.x_meas - self.X[0], spec.tube.P)
        cons += _set_constraints(self.U, spec.tube.U_hat)
        if state_set is not None:
            cons += _set_constraints(self.X, state_set)
        if with_reference:
            cons += _set_constraints(self.X[:N, self.idx] - self.ref, C_bar)
        self.Lp = _chol(self.ti.P_ric)
        cons.append(cvxpy.norm((self.X[N] - self.ti.xi) @ self.Lp) <= self.level_root)

        self.local_par = []
        for c, nu in self.local:
            rows = []
            for _ in range(len(nu)):
                G = cvxpy.Parameter((N + 1, n))
                h = cvxpy.Parameter(N + 1)
                cons.append(cvxpy.sum(cvxpy.multiply(G, self.X), axis=1) <= h)
                rows.append((G, h))
            self.local_par.append(rows)
        self.constraints = cons

        Lr = _chol(spec.R)
        effort = cvxpy.sum_squares((self.U - np.tile(spec.u_xi, (N, 1))) @ Lr)
        if objective == "effort":
            self.cost_expr = effort
        else:
            Lq = _chol(spec.Q)
            stage = cvxpy.sum_squares((self.X[:N] - np.tile(spec.xi, (N, 1))) @ Lq)
            terminal = self.ti.sigma * cvxpy.sum_squares((self.X[N] - self.ti.xi) @ self.Lp)
            self.cost_expr = stage + effort + terminal

    # -- data -------------------------------------------------------------

    def load(self, x_meas: Any, reference: Optional[np.ndarray] = None) -> None:
        self._x_meas = np.asarray(x_meas, dtype=float)
        self.x_meas.value = self._x_meas
        self.level_root.value = float(np.sqrt(max(self.ti.level, 0.0)))
        if self.with_reference:
            self._ref = np.asarray(reference, dtype=float)[:self.N][:, self.idx]
            self.ref.value = self._ref

    def linearize(self, X: np.ndarray, U: np.ndarray) -> None:
        nxt, A, B = self.spec.dyn.linearize(X[:-1], U)
        for j in range(self.N):
            self.A_par[j].value = A[j]
            self.B_par[j].value = B[j]
            self.c_par[j].value = nxt[j] - A[j] @ X[j] - B[j] @ U[j]
        for (c, nu), rows in zip(self.local, self.local_par):
            values, grad = linearize_constraint(c, {self.agent: X}, self.agent)
            for r, (G, h) in enumerate(rows):
                G.value = grad[:, r, :]
                h.value = np.einsum("tn,tn->t", grad[:, r, :], X) - values[:, r] - nu[r]

    # -- exact evaluation -------------------------------------------------

    def trial(self, X: np.ndarray, U: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        U_new = U + t * (self.U.value - U)
        x0 = self._x_meas if self.pin_initial else X[0] + t * (self.X.value[0] - X[0])
        return rollout(self.spec.dyn, x0, U_new), U_new

    def violations(self, X: np.ndarray, U: np.ndarray) -> dict[str, float]:
        spec = self.spec
        out = {}
        if self.pin_initial:
            out["initial"] = float(np.max(np.abs(X[0] - self._x_meas)))
        else:
            out["initial"] = float(violation(spec.tube.P, self._x_meas - X[0]))
        out["input"] = float(np.max(violation(spec.tube.U_hat, U)))
        if self.state_set is not None:
            out["state"] = float(np.max(violation(self.state_set, X)))
        if self.with_reference:
            out["consistency"] = float(np.max(violation(self.C_bar, X[:self.N, self.idx] - self._ref)))
        dN = X[self.N] - self.ti.xi
        out["terminal"] = float(dN @ self.ti.P_ric @ dN - max(self.ti.level, 0.0))
        for c, nu in self.local:
            values = np.asarray(eval_constraint(c, {self.agent: X})).reshape(X.shape[0], -1)
            out["local"] = max(out.get("local", -np.inf), float(np.max(values + nu)))
        return out

    def cost(self, X: np.ndarray, U: np.ndarray) -> float:
        du = U - self.spec.u_xi
        effort = float(np.einsum("ti,ij,tj->", du, self.spec.R, du))
        if self.objective == "effort":
            return effort
        dx = X[:self.N] - self.spec.xi
        dN = X[self.N] - self.ti.xi
        return (float(np.einsum("ti,ij,tj->", dx, self.spec.Q, dx)) + effort
                + self.ti.sigma * float(dN @ self.ti.P_ric @ dN))


class CoupledTerm:
    """A coupled constraint between variable agents and fixed trajectories.

    Connectivity constraints are kept as exact second-order cones; all other
    kinds are linearized at the current iterate.
    """

    def __init__(self, c: ConstraintSpec, blocks: Mapping[int, AgentBlock], nu: Any, horizon: int):
        self.c = c
        self.nu = np.atleast_1d(np.asarray(nu, dtype=float))
        self.variable = [p for p in c.participants if p in blocks]
        self.fixed_ids = [p for p in c.participants if p not in blocks]
        self.blocks = {p: blocks[p] for p in self.variable}
        self.T = horizon + 1
        self.fixed: dict[int, np.ndarray] = {}
        n_of = {p: b.spec.state_dim for p, b in self.blocks.items()}
        self.soc = c.kind == "connectivity"
        cons = []
        if self.soc:
            idx = list(c.indices)
            self.z = {p: cvxpy.Parameter((self.T, len(idx))) for p in self.fixed_ids}
            legs = [self.blocks[p].X[:, idx] if p in self.blocks else self.z[p] for p in c.participants]
            cons.append(cvxpy.norm(legs[0] - legs[1], 2, axis=1) <= c.d_max - float(self.nu[0]))
            self.rows = []
        else:
            rows = int(self.nu.shape[0])
            self.rows = []
            for _ in range(rows):
                G = {p: cvxpy.Parameter((self.T, n_of[p])) for p in self.variable}
                h = cvxpy.Parameter(self.T)
                lhs = sum(cvxpy.sum(cvxpy.multiply(G[p], self.blocks[p].X), axis=1) for p in self.variable)
                cons.append(lhs <= h)
                self.rows.append((G, h))
        self.constraints = cons

    def set_fixed(self, fixed: Mapping[int, np.ndarray]) -> None:
        self.fixed = {p: np.asarray(fixed[p], dtype=float)[:self.T] for p in self.fixed_ids}
        if self.soc:
            idx = list(self.c.indices)
            for p in self.fixed_ids:
                self.z[p].value = self.fixed[p][:, idx]

    def _states(self, points: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> dict[int, np.ndarray]:
        states = {p: points[p][0] for p in self.variable}
        states.update(self.fixed)
        return states

    def linearize(self, points: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> None:
        if self.soc:
            return
        states = self._states(points)
        grads = {p: linearize_constraint(self.c, states, p) for p in self.variable}
        values = next(iter(grads.values()))[0]
        for r, (G, h) in enumerate(self.rows):
            rhs = -values[:, r] - self.nu[r]
            for p in self.variable:
                g = grads[p][1][:, r, :]
                G[p].value = g
                rhs = rhs + np.einsum("tn,tn->t", g, states[p])
            h.value = rhs

    def violation(self, points: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> float:
        values = np.asarray(eval_constraint(self.c, self._states(points))).reshape(self.T, -1)
        return float(np.max(values + self.nu))


# ---------------------------------------------------------------------------
# SQP driver
# ---------------------------------------------------------------------------

@dataclass
class SqpOutcome:
    points: dict[int, tuple[np.ndarray, np.ndarray]]
    feasible: bool
    status: str
    iterations: int
    step_norm: float
    violations: dict[str, float]
    cost: float


def _evaluate(blocks: Mapping[int, AgentBlock], terms: Sequence[CoupledTerm],
              points: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> tuple[float, float, dict[str, float]]:
    families: dict[str, float] = {}
    cost = 0.0
    for a, b in blocks.items():
        X, U = points[a]
        for name, v in b.violations(X, U).items():
            families[name] = max(families.get(name, -np.inf), v)
        cost += b.cost(X, U)
    for t in terms:
        families["coupled"] = max(families.get("coupled", -np.inf), t.violation(points))
    worst = max(families.values()) if families else 0.0
    return worst, cost, families


def _better(v: float, c: float, cur_v: float, cur_c: float) -> bool:
    if v <= FEAS_TOL:
        return cur_v > FEAS_TOL or c <= cur_c + 1e-12
    return cur_v > FEAS_TOL and v < cur_v


def solver_chain(primary: str) -> list[str]:
    """``primary`` followed by the other installed conic solvers that can take the QP."""
    installed = set(cvxpy.installed_solvers())
    return [primary] + [s for s in CONIC_SOLVERS if s != primary and s in installed]


def _solve_qp(problem: cvxpy.Problem, solvers: Sequence[str]) -> str:
    """Solves with the first solver reaching an optimal status; returns the last status."""
    status = "solver_error"
    for name in solvers:
        try:
            problem.solve(solver=name)
        except cvxpy.error.SolverError as exc:
            logger.debug("QP solver %s failed: %s", name, exc)
            status = "solver_error"
            continue
        status = str(problem.status)
        if problem.status in (cvxpy.OPTIMAL, cvxpy.OPTIMAL_INACCURATE):
            if name != solvers[0]:
                logger.debug("QP solved by %s after %s failed", name, solvers[0])
            return "optimal"
        logger.debug("QP solver %s returned %s", name, status)
    return status


def run_sqp(problem: cvxpy.Problem, blocks: Mapping[int, AgentBlock], terms: Sequence[CoupledTerm],
            start: Mapping[int, tuple[np.ndarray, np.ndarray]], solver: str = DEFAULT_SOLVER,
            max_iter: int = MAX_SQP_ITERATIONS) -> SqpOutcome:
    """Sequential QP with rollout projection and backtracking.

    ``start`` must be dynamically consistent. Each QP is retried with the
    other installed conic solvers before the iteration gives up. The returned
    points are the best feasible iterate, or the last iterate if none was
    feasible.
    """
    points = dict(start)
    cur_v, cur_c, fam = _evaluate(blocks, terms, points)
    best = (dict(points), cur_c, fam) if cur_v <= FEAS_TOL else None
    solvers = solver_chain(solver)
    status = "max_iter"
    step = np.inf
    iterations = 0
    accepted_steps = 0
    for it in range(max_iter):
        iterations = it + 1
        for a, b in blocks.items():
            b.linearize(*points[a])
        for t in terms:
            t.linearize(points)
        qp_status = _solve_qp(problem, solvers)
        if qp_status != "optimal":
            status = qp_status
            break
        accepted = None
        for frac in BACKTRACK:
            trial = {a: b.trial(*points[a], frac) for a, b in blocks.items()}
            v, c, fam_t = _evaluate(blocks, terms, trial)
            if _better(v, c, cur_v, cur_c):
                accepted = (trial, v, c, fam_t)
                break
        if accepted is None:
            status = "stalled"
            break
        trial, v, c, fam_t = accepted
        step = max(max(float(np.max(np.abs(trial[a][1] - points[a][1]))),
                       float(np.max(np.abs(trial[a][0][0] - points[a][0][0])))) for a in blocks)
        points, cur_v, cur_c, fam = trial, v, c, fam_t
        accepted_steps += 1
        logger.debug("SQP iteration %d: cost=%.6g violation=%.3g step=%.3g", iterations, cur_c, cur_v, step)
        if cur_v <= FEAS_TOL and (best is None or cur_c <= best[1]):
            best = (dict(points), cur_c, fam)
        if step < STEP_TOL:
            status = "converged"
            break
    if accepted_steps == 0 and status not in ("converged", "max_iter", "stalled"):
        logger.warning("QP failed with %s on %s; keeping the warm start", status, ", ".join(solvers))
    if best is not None:
        return SqpOutcome(best[0], True, status, iterations, float(step), best[2], best[1])
    return SqpOutcome(points, False, status, iterations, float(step), fam, cur_c)


# ---------------------------------------------------------------------------
# Local solver
# ---------------------------------------------------------------------------

class LocalSolver:
    """Solves the local problems of one agent, reusing compiled QPs."""

    def __init__(self, spec: SubsystemSpec, horizon: int, solver: str = DEFAULT_SOLVER,
                 max_iter: int = MAX_SQP_ITERATIONS):
        self.spec = spec
        self.horizon = horizon
        self.solver = solver
        self.max_iter = max_iter
        self._templates: dict[tuple, tuple[cvxpy.Problem, AgentBlock, list[CoupledTerm]]] = {}
        self.solves = 0

    def _template(self, ocp: LocalOCP) -> tuple[cvxpy.Problem, AgentBlock, list[CoupledTerm]]:
        key = (
            ocp.pin_initial,
            ocp.reference is not None,
            ocp.objective,
            tuple(c.key for c, _ in ocp.local),
            tuple((o.constraint.key, len(np.atleast_1d(o.nu))) for o in ocp.obstacles),
        )
        if key not in self._templates:
            block = AgentBlock(self.spec, self.horizon, pin_initial=ocp.pin_initial,
                               with_reference=ocp.reference is not None, C_bar=ocp.C_bar,
                               local=ocp.local, state_set=ocp.state_set, objective=ocp.objective)
            terms = [CoupledTerm(o.constraint, {self.spec.agent: block}, o.nu, self.horizon)
                     for o in ocp.obstacles]
            constraints = list(block.constraints)
            for t in terms:
                constraints += t.constraints
            problem = cvxpy.Problem(cvxpy.Minimize(block.cost_expr), constraints)
            self._templates[key] = (problem, block, terms)
        return self._templates[key]

    def solve(self, ocp: LocalOCP, warm: TrajectoryWindow) -> OcpResult:
        started = time.perf_counter()
        problem, block, terms = self._template(ocp)
        block.load(ocp.x_measured, None if ocp.reference is None else ocp.reference.states)
        for t, o in zip(terms, ocp.obstacles):
            t.set_fixed(o.fixed)
        if warm.inputs is None or warm.inputs.shape[0] != self.horizon:
            raise DimensionMismatch("warm start must be a predicted window of the problem horizon")
        start = {self.spec.agent: (np.array(warm.states), np.array(warm.inputs))}
        outcome = run_sqp(problem, {self.spec.agent: block}, terms, start, self.solver, self.max_iter)
        self.solves += 1
        X, U = outcome.points[self.spec.agent]
        fallback = outcome.status not in ("converged", "max_iter") and np.array_equal(U, warm.inputs)
        if not outcome.feasible:
            logger.debug("agent %d at k=%d: no feasible iterate (%s)", self.spec.agent, ocp.k, outcome.status)
        return OcpResult(
            TrajectoryWindow(ocp.k, X, U),
            outcome.cost,
            outcome.status,
            outcome.iterations,
            outcome.step_norm,
            outcome.feasible,
            fallback,
            outcome.violations,
            time.perf_counter() - started,
        )


def solve_local(ocp: LocalOCP, warm: TrajectoryWindow, solver: str = DEFAULT_SOLVER) -> OcpResult:
    """One-shot solve of a local problem (compiles a fresh QP)."""
    return LocalSolver(ocp.spec, ocp.horizon, solver).solve(ocp, warm)


def window_cost(spec: SubsystemSpec, window: TrajectoryWindow) -> float:
    """Stage costs plus terminal cost of a predicted window."""
    N = window.inputs.shape[0]
    stage = float(np.sum(spec.stage_cost(window.states[:N], window.inputs)))
    return stage + float(spec.terminal.cost(window.states[N]))


# ---------------------------------------------------------------------------
# Candidates and applied inputs
# ---------------------------------------------------------------------------

def build_candidate(prev: TrajectoryWindow, ti: TerminalIngredients, dyn: SubsystemDynamics,
                    check: bool = True) -> TrajectoryWindow:
    """Shift ``prev`` by one step and append one step of the terminal controller."""
    if prev.inputs is None:
        raise DimensionMismatch("candidates are built from predicted windows")
    x_end = prev.states[-1]
    if check and not ti.contains(x_end, tol=FEAS_TOL):
        raise TheoremViolation("terminal_set", k=prev.k,
                               detail=f"terminal cost {float(ti.cost(x_end)):.6g} exceeds {ti.gamma:.6g}")
    u_end = ti.control(x_end)
    x_next = dyn.step(x_end, u_end)
    states = np.vstack([prev.states[1:], x_next])
    inputs = np.vstack([prev.inputs[1:], u_end])
    return TrajectoryWindow(prev.k + 1, states, inputs)


def apply_control(x: Any, solution: TrajectoryWindow, tube: TubeIngredients, tol: float = FEAS_TOL) -> np.ndarray:
    """``u = u_hat[k|k] + K(x, x_hat[k|k], u_hat[k|k])``; must lie in ``U``."""
    x = np.asarray(x, dtype=float)
    x_hat, u_hat = solution.states[0], solution.inputs[0]
    u = u_hat + tube.aux(x, x_hat, u_hat)
    if not contains(tube.U, u, tol=tol):
        raise TheoremViolation("input_outside_U", k=solution.k,
                               detail=f"u={np.round(u, 6).tolist()}")
    return u


def straight_window(dyn: SubsystemDynamics, x0: Any, u: Any, horizon: int, k: int = 0) -> TrajectoryWindow:
    """Window obtained by holding ``u`` over the horizon."""
    inputs = np.tile(np.asarray(u, dtype=float), (horizon, 1))
    return TrajectoryWindow(k, rollout(dyn, x0, inputs), inputs)


def track_path(dyn: SubsystemDynamics, x0: Any, path: np.ndarray, u_rest: Any, U: SetDescriptor,
               k: int = 0) -> TrajectoryWindow:
    """Inputs that steer along ``path`` by one-step linearized inversion, clipped to ``U``."""
    x = np.asarray(x0, dtype=float)
    u_rest = np.asarray(u_rest, dtype=float)
    states, inputs = [x], []
    bounds = U if isinstance(U, Box) else None
    for target in path[1:]:
        nxt, _, B = dyn.linearize(x, u_rest)
        u = u_rest + np.linalg.pinv(B) @ (target - nxt)
        if bounds is not None:
            u = np.clip(u, bounds.lower, bounds.upper)
        x = dyn.step(x, u)
        states.append(x)
        inputs.append(u)
    return TrajectoryWindow(k, np.array(states), np.array(inputs))


def problem_blocks(blocks: Iterable[AgentBlock], terms: Iterable[CoupledTerm], objective_scale: float = 1.0
                   ) -> cvxpy.Problem:
    """One cvxpy problem over several agent blocks and coupled terms."""
    blocks = list(blocks)
    constraints = [c for b in blocks for c in b.constraints]
    for t in terms:
        constraints += t.constraints
    return cvxpy.Problem(cvxpy.Minimize(objective_scale * sum(b.cost_expr for b in blocks)), constraints)
