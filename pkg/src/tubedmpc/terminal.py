"""Terminal ingredients: Riccati cost, terminal controller and level-set selection.

The terminal cost is ``J^f(x) = sigma (x - xi)^T P (x - xi)`` with ``P`` the
stabilizing DARE solution of the RK4 linearization at the target, the terminal
set is the level set ``J^f <= gamma``. The input and state limits of the level
set are certified exactly through support functions, the invariance and
decrease conditions on seeded samples.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np
from scipy.linalg import solve_discrete_are

from tubedmpc.coupling import ConstraintSpec, CouplingGraph, eval_constraint, tightening_scalars
from tubedmpc.errors import DareError, InitializationError
from tubedmpc.setgeom import Ball, Box, EmptySet, HPolytope, SetDescriptor, as_hpolytope
from tubedmpc.subsystem import SubsystemSpec

logger = logging.getLogger(__name__)

DARE_RESIDUAL_TOL = 1e-8
SIGMA_MAX_EXPONENT = 20
LEVEL_SEARCH_STEPS = 60
LEVEL_BISECTION_STEPS = 40
CERT_TOL = 1e-9
# sampled items keep this share of the largest level found on the search samples
LEVEL_BACKOFF = 0.95


# ---------------------------------------------------------------------------
# Riccati equation
# ---------------------------------------------------------------------------

def _check_stabilizable(A: np.ndarray, B: np.ndarray) -> None:
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0 - 1e-12:
            continue
        pbh = np.hstack([A - lam * np.eye(n), B.astype(complex)])
        if np.linalg.matrix_rank(pbh, tol=1e-10) < n:
            raise DareError(f"(A, B) is not stabilizable: mode {lam:.6g} is uncontrollable")


def _check_spd(M: np.ndarray, name: str) -> None:
    if not np.allclose(M, M.T, atol=1e-12) or np.any(np.linalg.eigvalsh(M) <= 0):
        raise DareError(f"{name} must be symmetric positive definite")


def dare_residual(A: Any, B: Any, Q: Any, R: Any, P: Any) -> float:
    A, B, Q, R, P = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R, P))
    APB = A.T @ P @ B
    res = A.T @ P @ A - APB @ np.linalg.solve(R + B.T @ P @ B, APB.T) + Q - P
    return float(np.linalg.norm(res))


def terminal_gain(A: Any, B: Any, R: Any, P: Any) -> np.ndarray:
    """``K = -(R + B^T P B)^-1 B^T P A``."""
    A, B, R, P = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, R, P))
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def solve_dare(A: Any, B: Any, Q: Any, R: Any) -> np.ndarray:
    """Stabilizing solution of the discrete-time algebraic Riccati equation."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    _check_spd(Q, "Q")
    _check_spd(R, "R")
    _check_stabilizable(A, B)
    try:
        P = solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DareError(f"Riccati solver failed: {exc}") from exc
    P = 0.5 * (P + P.T)
    residual = dare_residual(A, B, Q, R, P)
    if not np.isfinite(residual) or residual >= DARE_RESIDUAL_TOL * max(1.0, np.linalg.norm(P)):
        raise DareError(f"Riccati residual {residual:.3e} too large")
    if np.any(np.linalg.eigvalsh(P) <= 0):
        raise DareError("Riccati solution is not positive definite")
    closed = A + B @ terminal_gain(A, B, R, P)
    if np.max(np.abs(np.linalg.eigvals(closed))) >= 1.0:
        raise DareError("Riccati closed loop is not Schur")
    return P


# ---------------------------------------------------------------------------
# Ingredients
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    """Terminal cost ``sigma ||x - xi||_P^2``, controller and level ``gamma``."""

    P_ric: np.ndarray
    K_f: np.ndarray
    sigma: float
    gamma: float
    alpha: float
    xi: np.ndarray
    u_xi: np.ndarray
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    gamma_tilde: float = 0.0

    @property
    def level(self) -> float:
        """Level of the unscaled quadratic form, ``gamma / sigma``."""
        return self.gamma / self.sigma if self.sigma > 0 else 0.0

    def cost(self, x: Any) -> np.ndarray:
        dx = np.asarray(x, dtype=float) - self.xi
        return self.sigma * np.einsum("...i,ij,...j->...", dx, self.P_ric, dx)

    def control(self, x: Any) -> np.ndarray:
        return self.u_xi + (np.asarray(x, dtype=float) - self.xi) @ self.K_f.T

    def contains(self, x: Any, tol: float = 1e-9) -> bool:
        return bool(self.cost(x) <= self.gamma + tol)

    def radius(self, indices: Optional[tuple[int, ...]] = None) -> float:
        """Largest distance from ``xi`` over the level set, in the given coordinates."""
        if self.level <= 0:
            return 0.0
        inv = np.linalg.inv(self.P_ric)
        if indices is not None:
            inv = inv[np.ix_(indices, indices)]
        return float(np.sqrt(self.level * np.max(np.linalg.eigvalsh(inv))))

    def halfwidths(self) -> np.ndarray:
        """Half-widths of the bounding box of the level set around ``xi``."""
        return np.sqrt(np.maximum(self.level, 0.0) * np.diag(np.linalg.inv(self.P_ric)))

    def with_level(self, level: float, sigma: Optional[float] = None) -> "TerminalIngredients":
        sigma = self.sigma if sigma is None else sigma
        return dataclasses.replace(self, sigma=sigma, gamma=sigma * level)

    def to_dict(self) -> dict[str, Any]:
        return {
            "P_ric": self.P_ric.tolist(),
            "K_f": self.K_f.tolist(),
            "sigma": self.sigma,
            "gamma": self.gamma,
            "gamma_tilde": self.gamma_tilde,
            "alpha": self.alpha,
            "xi": self.xi.tolist(),
            "u_xi": self.u_xi.tolist(),
        }


def design_terminal(spec: SubsystemSpec) -> TerminalIngredients:
    """Linearize at ``(xi, u_xi)`` and solve the DARE; ``sigma = 1``, ``gamma = 0``."""
    _, A, B = spec.dyn.linearize(spec.xi, spec.u_xi)
    try:
        P = solve_dare(A, B, spec.Q, spec.R)
    except DareError as exc:
        raise InitializationError(3, f"agent {spec.agent}: {exc}") from exc
    K = terminal_gain(A, B, spec.R, P)
    return TerminalIngredients(P, K, 1.0, 0.0, spec.alpha, spec.xi.copy(), spec.u_xi.copy(), A, B)


# ---------------------------------------------------------------------------
# Sampled certification
# ---------------------------------------------------------------------------

@dataclass
class ItemResult:
    passed: bool
    margin: float


@dataclass
class TerminalReport:
    """Pass/fail and worst margin per certified item."""

    agent: int
    items: dict[str, ItemResult] = field(default_factory=dict)
    sigma_required: float = 1.0

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.items.values())

    def failed(self) -> list[str]:
        return [name for name, item in self.items.items() if not item.passed]

    def add(self, name: str, margin: float) -> None:
        self.items[name] = ItemResult(bool(margin >= -CERT_TOL), float(margin))

    def to_dict(self) -> dict[str, Any]:
        return {name: {"passed": it.passed, "margin": it.margin} for name, it in self.items.items()}


def _unit_samples(n: int, samples: int, seed: int) -> np.ndarray:
    """Seeded directions on the unit sphere followed by points in the unit ball."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((2 * samples, n))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    radii = np.ones((2 * samples, 1))
    radii[samples:, 0] = rng.uniform(size=samples) ** (1.0 / n)
    return d * radii


def _level_points(ti: TerminalIngredients, level: float, unit: np.ndarray) -> np.ndarray:
    if level <= 0:
        return ti.xi[None, :]
    L = np.linalg.cholesky(ti.P_ric)
    return ti.xi + np.sqrt(level) * np.linalg.solve(L.T, unit.T).T


def ellipsoid_margin(S: SetDescriptor, center: np.ndarray, shape: np.ndarray, level: float,
                     shift: Optional[np.ndarray] = None) -> float:
    """Exact worst margin of ``{center + d : d^T shape^-1 d <= level}`` inside ``S``.

    ``shape`` may be singular (images of the level set under a gain). The
    support of the ellipsoid in direction ``a`` is ``sqrt(level a^T shape a)``.
    """
    if isinstance(S, EmptySet):
        return -np.inf
    level = max(level, 0.0)
    if isinstance(S, Ball):
        reach = np.sqrt(level * max(float(np.max(np.linalg.eigvalsh(shape))), 0.0))
        return float(S.radius - np.linalg.norm(center - S.center) - reach)
    poly = as_hpolytope(S)
    norms = np.linalg.norm(poly.A, axis=1)
    reach = np.sqrt(level * np.maximum(np.einsum("ri,ij,rj->r", poly.A, shape, poly.A), 0.0))
    slack = poly.b - poly.A @ center - reach
    if shift is not None:
        slack = slack - shift
    return float(np.min(slack / norms))


def _decrease_data(spec: SubsystemSpec, ti: TerminalIngredients, pts: np.ndarray) -> tuple[np.ndarray, ...]:
    """Next quadratic-form values, their drop and the stage cost at ``pts``."""
    u = ti.control(pts)
    nxt = spec.dyn.step(pts, u)
    dx, dn = pts - ti.xi, nxt - ti.xi
    v_now = np.einsum("ni,ij,nj->n", dx, ti.P_ric, dx)
    v_next = np.einsum("ni,ij,nj->n", dn, ti.P_ric, dn)
    return v_next, v_now - v_next, spec.stage_cost(pts, u)


def _sigma_needed(drop: np.ndarray, stage: np.ndarray) -> float:
    """Smallest sigma with ``sigma * drop >= stage``; inf if the form does not drop."""
    active = stage > CERT_TOL
    if np.any(active & (drop <= 0)):
        return np.inf
    return float(np.max(stage[active] / drop[active])) if np.any(active) else 0.0


def _power_of_two(need: float) -> float:
    if not np.isfinite(need):
        return np.inf
    if need <= 1.0:
        return 1.0
    exponent = int(np.ceil(np.log2(need)))
    if exponent > SIGMA_MAX_EXPONENT:
        return np.inf
    sigma = 2.0 ** exponent
    return sigma if sigma >= need else 2.0 * sigma


def _local_items(spec: SubsystemSpec, ti: TerminalIngredients, level: float, unit: np.ndarray,
                 local: tuple[ConstraintSpec, ...], report: TerminalReport) -> float:
    """Certify the agent-local items at ``level``; returns the sigma they need.

    Input and box/polytope state items are exact, the remaining items are
    checked on the sample points.
    """
    pts = _level_points(ti, level, unit)
    P_inv = np.linalg.inv(ti.P_ric)
    report.add("input", ellipsoid_margin(spec.tube.U_hat, ti.u_xi, ti.K_f @ P_inv @ ti.K_f.T, level))

    v_next, drop, stage = _decrease_data(spec, ti, pts)
    report.add("invariance", level - float(np.max(v_next)))
    sigma = _power_of_two(_sigma_needed(drop, stage))
    report.sigma_required = sigma
    if np.isfinite(sigma):
        report.add("decrease", float(np.min(sigma * drop - stage)))
    else:
        report.add("decrease", float(np.min(drop - stage)))

    margin = np.inf
    X_hat = spec.X_hat
    if X_hat is not None:
        if isinstance(X_hat, (Box, HPolytope)):
            poly = as_hpolytope(X_hat)
            idx = list(spec.consistency_indices)
            alpha_shift = spec.alpha * np.linalg.norm(poly.A[:, idx], axis=1)
            margin = ellipsoid_margin(poly, ti.xi, P_inv, level, alpha_shift)
        else:
            margin = ellipsoid_margin(X_hat, ti.xi, P_inv, level) - spec.alpha
    for c in local:
        nu = tightening_scalars(c, {spec.agent: (spec.tube.P, Ball.origin(spec.state_dim, spec.alpha))})
        values = eval_constraint(c, {spec.agent: pts}) + np.atleast_1d(nu)
        margin = min(margin, float(-np.max(values)))
    report.add("state", margin if margin != np.inf else 0.0)
    return sigma


def _inflated(spec: SubsystemSpec, ti: TerminalIngredients, c: ConstraintSpec) -> tuple:
    n = spec.state_dim
    if c.kind == "affine":
        level_set = Box.symmetric(ti.halfwidths())
    else:
        level_set = Ball.origin(n, ti.radius(c.indices))
    return (level_set, spec.tube.P, Ball.origin(n, spec.alpha))


def coupled_margin(c: ConstraintSpec, specs: Mapping[int, SubsystemSpec],
                   terminals: Mapping[int, TerminalIngredients]) -> float:
    """Worst margin of ``c`` over the participants' inflated terminal sets.

    The inflated set is the level set plus ``P`` plus the ball of radius
    ``alpha``; the margin is certified with the Lipschitz surrogate.
    """
    sets = {p: _inflated(specs[p], terminals[p], c) for p in c.participants}
    nu = tightening_scalars(c, sets)
    centers = {p: specs[p].xi for p in c.participants}
    return float(-np.max(eval_constraint(c, centers) + np.atleast_1d(nu)))


def verify_terminal_assumptions(ti: TerminalIngredients, spec: SubsystemSpec,
                                neighbors: Mapping[int, tuple[SubsystemSpec, TerminalIngredients]],
                                graph: Optional[CouplingGraph] = None, samples: int = 1000,
                                seed: int = 0) -> TerminalReport:
    """Sampled certification of the terminal ingredients of one agent.

    Items: ``input`` (terminal control in the tightened input set),
    ``invariance`` (the level set is invariant), ``decrease`` (the terminal
    cost decreases at least by the stage cost), ``state`` (level set inside the
    tightened state constraints with margin ``alpha``) and ``coupled``
    (coupled constraints on the inflated terminal sets of all participants).
    """
    report = TerminalReport(spec.agent)
    unit = _unit_samples(spec.state_dim, samples, seed)
    local = tuple(graph.local_of(spec.agent)) if graph is not None else ()
    _local_items(spec, ti, ti.level, unit, local, report)
    _, drop, stage = _decrease_data(spec, ti, _level_points(ti, ti.level, unit))
    report.add("decrease", float(np.min(ti.sigma * drop - stage)))
    margin = np.inf
    if graph is not None:
        specs = {spec.agent: spec, **{j: s for j, (s, _) in neighbors.items()}}
        terminals = {spec.agent: ti, **{j: t for j, (_, t) in neighbors.items()}}
        for c in graph.coupled_of(spec.agent):
            missing = [p for p in c.participants if p not in specs]
            if missing:
                continue
            margin = min(margin, coupled_margin(c, specs, terminals))
    report.add("coupled", margin if np.isfinite(margin) else 0.0)
    return report


# ---------------------------------------------------------------------------
# Level selection
# ---------------------------------------------------------------------------

def _local_ok(spec: SubsystemSpec, ti: TerminalIngredients, level: float, unit: np.ndarray,
              local: tuple[ConstraintSpec, ...]) -> tuple[bool, float]:
    report = TerminalReport(spec.agent)
    sigma = _local_items(spec, ti, level, unit, local, report)
    return report.passed, sigma


def _largest_local_level(spec: SubsystemSpec, ti: TerminalIngredients, unit: np.ndarray,
                         local: tuple[ConstraintSpec, ...]) -> float:
    """Doubling or halving from a small start level, then bisection."""

    def ok(level: float) -> bool:
        return _local_ok(spec, ti, level, unit, local)[0]

    start = float(np.min(np.linalg.eigvalsh(ti.P_ric))) * 1e-4
    if ok(start):
        lo, hi = start, None
        for _ in range(LEVEL_SEARCH_STEPS):
            if not ok(2.0 * lo):
                hi = 2.0 * lo
                break
            lo *= 2.0
        if hi is None:
            return lo
    else:
        lo, hi = 0.0, start
        for _ in range(LEVEL_SEARCH_STEPS):
            if ok(0.5 * hi):
                lo = 0.5 * hi
                break
            hi *= 0.5
        if lo == 0.0:
            return 0.0
    for _ in range(LEVEL_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def select_gamma(specs: Mapping[int, SubsystemSpec], graph: CouplingGraph, samples: int = 1000,
                 seed: int = 0) -> dict[int, TerminalIngredients]:
    """Terminal ingredients with certified levels for all agents.

    Each agent first gets the largest level passing its local items. Every
    violated coupled constraint then scales the levels of all of its
    participants by a common factor, bisected to the largest admissible one.
    The pass over the constraints repeats until no level changes.
    Initialization fails only if a constraint is violated with point terminal
    sets for every participant.
    """
    base = {i: design_terminal(specs[i]) for i in sorted(specs)}
    levels: dict[int, float] = {}
    tilde: dict[int, float] = {}
    for i, ti in base.items():
        unit = _unit_samples(specs[i].state_dim, samples, seed + i)
        levels[i] = LEVEL_BACKOFF * _largest_local_level(specs[i], ti, unit, tuple(graph.local_of(i)))
        tilde[i] = levels[i]
        logger.info("agent %d: local terminal level %.6g", i, levels[i])

    def scaled(c: ConstraintSpec, scale: float) -> dict[int, TerminalIngredients]:
        return {p: base[p].with_level(scale * levels[p]) for p in c.participants}

    coupled = [c for c in graph.constraints if c.coupled]
    for _ in range(len(coupled) + 1):
        changed = False
        for c in coupled:
            if coupled_margin(c, specs, scaled(c, 1.0)) >= -CERT_TOL:
                continue
            if coupled_margin(c, specs, scaled(c, 0.0)) < -CERT_TOL:
                raise InitializationError(
                    3, f"targets violate {c.label} even with point terminal sets "
                       f"(target state not admissible)")
            lo, hi = 0.0, 1.0
            for _ in range(LEVEL_BISECTION_STEPS):
                mid = 0.5 * (lo + hi)
                if coupled_margin(c, specs, scaled(c, mid)) >= -CERT_TOL:
                    lo = mid
                else:
                    hi = mid
            for p in c.participants:
                levels[p] *= lo
            changed = True
            logger.info("%s: participant terminal levels scaled by %.4g", c.label, lo)
        if not changed:
            break

    out: dict[int, TerminalIngredients] = {}
    for i, ti in base.items():
        if levels[i] <= 0.0:
            raise InitializationError(3, f"agent {i}: no positive terminal level passes the certification")
        unit = _unit_samples(specs[i].state_dim, samples, seed + i)
        ok, sigma = _local_ok(specs[i], ti, levels[i], unit, tuple(graph.local_of(i)))
        if not ok or not np.isfinite(sigma):
            raise InitializationError(3, f"agent {i}: terminal level {levels[i]:.3g} failed re-certification")
        sigma_tilde = _local_ok(specs[i], ti, tilde[i], unit, tuple(graph.local_of(i)))[1]
        # a larger sigma keeps the decrease condition and bounds gamma by gamma_tilde
        if np.isfinite(sigma_tilde):
            sigma = max(sigma, sigma_tilde)
        else:
            sigma_tilde = sigma
        out[i] = dataclasses.replace(ti, sigma=sigma, gamma=sigma * levels[i],
                                     gamma_tilde=sigma_tilde * tilde[i])
        logger.info("agent %d: terminal sigma=%g gamma=%.6g", i, sigma, out[i].gamma)
    return out
