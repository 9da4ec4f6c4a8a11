"""Scenario files: loading, dotted overrides and the bundled multi-robot cases."""

import copy
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from tubedmpc.coupling import ConstraintSpec, CouplingGraph, constraint_from_dict
from tubedmpc.errors import ScenarioError
from tubedmpc.model import DEFAULT_CONTROL_SUBSTEPS, ModelKind, SubsystemDynamics, model_from_dict, steady_input
from tubedmpc.setgeom import Box, SetDescriptor, contains, from_dict

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).parent / "resources" / "scenarios"

ALIASES = {
    "cbar": "c_bar",
    "alpha": "alpha",
    "beta": "beta",
    "horizon": "horizon",
    "tsim": "tsim",
    "dt": "dt",
    "disturbance_scale": "disturbance_scale",
    "substeps": "control_substeps",
}
_XI_ALIAS = re.compile(r"^xi(\d)(\d)$")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AgentConfig:
    """Raw per-agent parameters before any set computation."""

    id: int
    model: ModelKind
    lam: np.ndarray
    W: SetDescriptor
    U: SetDescriptor
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    xi: np.ndarray
    u_xi: np.ndarray
    X: Optional[SetDescriptor] = None


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    description: str
    dt: float
    horizon: int
    tsim: int
    agents: tuple[AgentConfig, ...]
    constraints: tuple[ConstraintSpec, ...]
    c_bar: float
    alpha: float
    beta: float
    consistency_indices: tuple[int, ...] = (0, 1)
    control_substeps: int = DEFAULT_CONTROL_SUBSTEPS
    disturbance_scale: float = 1.0
    init_objective: str = "effort"
    init_guess: str = "straight"
    latency: tuple[float, float] = (0.0, 0.0)
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def agent_ids(self) -> list[int]:
        return [a.id for a in self.agents]

    def agent(self, i: int) -> AgentConfig:
        for a in self.agents:
            if a.id == i:
                return a
        raise ScenarioError(f"scenario {self.name!r} has no agent {i}")

    def graph(self) -> CouplingGraph:
        return CouplingGraph.build(self.agent_ids, self.constraints)

    def dynamics(self, i: int, substeps: Optional[int] = None) -> SubsystemDynamics:
        return SubsystemDynamics(self.agent(i).model, self.dt, substeps or self.control_substeps)

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self.raw)


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def matrix(value: Any, dim: int, name: str) -> np.ndarray:
    """Scalar (times identity), diagonal list or full matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(dim)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (dim, dim):
        raise ScenarioError(f"{name} has shape {arr.shape}, expected {(dim, dim)}")
    return arr


def set_value(value: Any, dim: int, name: str) -> SetDescriptor:
    """Half-width list (symmetric box) or a set object."""
    if isinstance(value, Mapping):
        try:
            s = from_dict(dict(value))
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"{name}: {exc}") from exc
    else:
        widths = np.atleast_1d(np.asarray(value, dtype=float))
        s = Box.symmetric(widths)
    if s.dim != dim:
        raise ScenarioError(f"{name} has dimension {s.dim}, expected {dim}")
    return s


def _vector(value: Any, dim: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (dim,):
        raise ScenarioError(f"{name} has length {arr.size}, expected {dim}")
    return arr


def _tokens(path: str) -> list[Union[str, int]]:
    parts = re.findall(r"[^.\[\]]+", path)
    if not parts:
        raise ScenarioError(f"empty override path {path!r}")
    return [int(p) if p.isdigit() else p for p in parts]


def resolve_alias(key: str) -> str:
    """Map override shortcuts such as ``xi11`` or ``cbar`` to dotted paths."""
    m = _XI_ALIAS.match(key)
    if m:
        return f"agents[{int(m.group(1)) - 1}].xi[{int(m.group(2)) - 1}]"
    return ALIASES.get(key, key)


def apply_override(data: dict[str, Any], key: str, value: Any) -> None:
    """Set a dotted/indexed path such as ``agents[0].xi[0]`` in place."""
    tokens = _tokens(resolve_alias(key))
    node: Any = data
    for pos, tok in enumerate(tokens[:-1]):
        nxt = tokens[pos + 1]
        try:
            if isinstance(tok, int):
                node = node[tok]
            else:
                if tok not in node:
                    node[tok] = [] if isinstance(nxt, int) else {}
                node = node[tok]
        except (IndexError, KeyError, TypeError) as exc:
            raise ScenarioError(f"override {key!r}: no element {tok!r}") from exc
    last = tokens[-1]
    try:
        node[last] = value
    except (IndexError, TypeError) as exc:
        raise ScenarioError(f"override {key!r}: cannot set {last!r}") from exc


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def list_scenarios() -> list[dict[str, str]]:
    """Bundled scenarios with their descriptions."""
    out = []
    for path in sorted(SCENARIO_DIR.glob("*.json")):
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError):
            continue
        out.append({"name": path.stem, "description": data.get("description", ""), "path": str(path)})
    return out


def scenario_path(name_or_path: Union[str, Path]) -> Path:
    path = Path(name_or_path).expanduser()
    if path.exists():
        return path
    bundled = SCENARIO_DIR / f"{name_or_path}.json"
    if bundled.exists():
        return bundled
    known = ", ".join(s["name"] for s in list_scenarios())
    raise ScenarioError(f"scenario {name_or_path!r} not found (bundled: {known})")


def load_scenario(name_or_path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> Scenario:
    """Read a scenario file (or bundled name) and apply ``--set`` overrides."""
    path = scenario_path(name_or_path)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path} is not valid JSON: {exc}") from exc
    data.setdefault("name", path.stem)
    for key, value in (overrides or {}).items():
        apply_override(data, key, value)
    return scenario_from_dict(data)


def _agent_from_dict(index: int, entry: Mapping[str, Any], defaults: Mapping[str, Any]) -> AgentConfig:
    merged = {**defaults, **entry}
    aid = int(merged.get("id", index + 1))
    name = f"agent {aid}"
    model = model_from_dict(dict(merged.get("model", {"kind": "omni"})))
    n, m = model.state_dim, model.input_dim
    if "x0" not in merged or "xi" not in merged:
        raise ScenarioError(f"{name}: x0 and xi are required")
    x0 = _vector(merged["x0"], n, f"{name} x0")
    xi = _vector(merged["xi"], n, f"{name} xi")
    W = set_value(merged.get("W", [0.0] * model.disturbance_dim), model.disturbance_dim, f"{name} W")
    U = set_value(merged["U"], m, f"{name} U") if "U" in merged else None
    if U is None:
        raise ScenarioError(f"{name}: input set U is required")
    lam = matrix(merged.get("lambda", -1.0), n, f"{name} lambda")
    X = set_value(merged["X"], n, f"{name} X") if merged.get("X") is not None else None
    u_xi = steady_input(model, xi)
    if not contains(U, u_xi):
        raise ScenarioError(f"{name}: steady input {u_xi.tolist()} at the target is outside U")
    if X is not None and not contains(X, xi):
        raise ScenarioError(f"{name}: target {xi.tolist()} is outside the state set")
    return AgentConfig(aid, model, lam, W, U, matrix(merged.get("Q", 1.0), n, f"{name} Q"),
                       matrix(merged.get("R", 1.0), m, f"{name} R"), x0, xi, u_xi, X)


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    """Validate and convert the JSON form of a scenario."""
    raw = copy.deepcopy(dict(data))
    entries = raw.get("agents") or []
    if not entries:
        raise ScenarioError("scenario declares no agents")
    defaults = raw.get("defaults", {})
    agents = tuple(_agent_from_dict(k, e, defaults) for k, e in enumerate(entries))
    ids = [a.id for a in agents]
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"duplicate agent ids {ids}")
    constraints = tuple(_constraints(raw.get("constraints", []), ids))

    c_bar = float(raw.get("c_bar", 0.125))
    alpha = float(raw.get("alpha", math.sqrt(2) * c_bar))
    beta = float(raw.get("beta", math.sqrt(2) * c_bar))
    horizon = int(raw.get("horizon", 36))
    tsim = int(raw.get("tsim", 100))
    dt = float(raw.get("dt", 1.0 / 3.0))
    if horizon < 1:
        raise ScenarioError("horizon must be at least 1")
    if tsim < 0:
        raise ScenarioError("tsim must not be negative")
    if c_bar <= 0 or alpha <= 0 or beta <= 0:
        raise ScenarioError("c_bar, alpha and beta must be positive")
    scale = float(raw.get("disturbance_scale", 1.0))
    if scale < 0:
        raise ScenarioError("disturbance_scale must not be negative")
    init = raw.get("init", {})
    latency = raw.get("latency", {})
    scenario = Scenario(
        name=str(raw.get("name", "scenario")),
        description=str(raw.get("description", "")),
        dt=dt,
        horizon=horizon,
        tsim=tsim,
        agents=agents,
        constraints=constraints,
        c_bar=c_bar,
        alpha=alpha,
        beta=beta,
        consistency_indices=tuple(int(i) for i in raw.get("consistency_indices", (0, 1))),
        control_substeps=int(raw.get("control_substeps", DEFAULT_CONTROL_SUBSTEPS)),
        disturbance_scale=scale,
        init_objective=str(init.get("objective", "effort")),
        init_guess=str(init.get("guess", "straight")),
        latency=(float(latency.get("constant", 0.0)), float(latency.get("jitter", 0.0))),
        raw=raw,
    )
    scenario.graph().validate()
    logger.info("loaded scenario %s: %d agents, %d constraints, N=%d", scenario.name, len(agents),
                len(constraints), horizon)
    return scenario


def _constraints(entries: Any, ids: list[int]) -> list[ConstraintSpec]:
    """Constraint list; ``"participants": "all_pairs"`` expands to every pair."""
    out = []
    for entry in entries:
        participants = entry.get("participants")
        if participants == "all_pairs":
            for a in range(len(ids)):
                for b in range(a + 1, len(ids)):
                    out.append(constraint_from_dict({**entry, "participants": [ids[a], ids[b]]}))
            continue
        c = constraint_from_dict(entry)
        unknown = [p for p in c.participants if p not in ids]
        if unknown:
            raise ScenarioError(f"{c.label} refers to unknown agents {unknown}")
        out.append(c)
    return out
