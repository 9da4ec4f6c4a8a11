"""State constraints, the coupling graph and Lipschitz tightening margins.

Every constraint is written ``c(x_participants) <= 0`` and is stored once,
shared by all of its participants, so each neighbor sees the identical
function. Constraints with a single participant are the uncoupled ``h_i``.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from tubedmpc.errors import ScenarioError
from tubedmpc.setgeom import SetDescriptor, max_point_distance, project, support

logger = logging.getLogger(__name__)

DISTANCE_KINDS = ("connectivity", "collision")
CONSTRAINT_KINDS = DISTANCE_KINDS + ("affine", "custom")

Evaluator = Callable[..., Any]
SetSummands = Union[SetDescriptor, Sequence[SetDescriptor]]


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """One (possibly coupled) state constraint ``c(x_p1, x_p2, ...) <= 0``.

    Distance constraints act on the coordinates ``indices`` of two agents and
    are Lipschitz with constant 1 with respect to the sum of the participants'
    deviations. Affine constraints ``A [x_p1; x_p2; ...] <= b`` are tightened
    exactly through support functions. Custom constraints bring their own
    evaluator and Lipschitz constant.
    """

    kind: str
    participants: tuple[int, ...]
    d_max: Optional[float] = None
    d_min: Optional[float] = None
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    evaluator: Optional[Evaluator] = field(default=None, repr=False)
    lipschitz: float = 1.0
    indices: Optional[tuple[int, ...]] = (0, 1)
    lipschitz_norm: str = "sum"
    name: str = ""

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ScenarioError(f"unknown constraint kind: {self.kind!r}")
        object.__setattr__(self, "participants", tuple(int(p) for p in self.participants))
        if len(set(self.participants)) != len(self.participants) or not self.participants:
            raise ScenarioError("constraint participants must be distinct and non-empty")
        if self.lipschitz_norm not in ("sum", "euclidean"):
            raise ScenarioError(f"unknown Lipschitz norm: {self.lipschitz_norm!r}")
        if self.kind in DISTANCE_KINDS:
            if len(self.participants) != 2:
                raise ScenarioError(f"{self.kind} constraints couple exactly two agents")
            bound = self.d_max if self.kind == "connectivity" else self.d_min
            if bound is None or bound <= 0:
                raise ScenarioError(f"{self.kind} constraint needs a positive distance bound")
            if self.lipschitz != 1.0:
                raise ScenarioError("distance constraints are Lipschitz with constant 1")
        elif self.kind == "affine":
            if self.A is None or self.b is None:
                raise ScenarioError("affine constraints need A and b")
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            b = np.atleast_1d(np.asarray(self.b, dtype=float))
            if A.shape[0] != b.shape[0]:
                raise ScenarioError("affine constraint A and b row counts differ")
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "b", b)
        elif self.evaluator is None or self.lipschitz <= 0:
            raise ScenarioError("custom constraints need an evaluator and a positive Lipschitz constant")
        if self.indices is not None:
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    @property
    def coupled(self) -> bool:
        return len(self.participants) > 1

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"{self.kind}{list(self.participants)}"

    @property
    def key(self) -> tuple:
        """Identity used to merge duplicate declarations of one constraint."""
        payload: Any
        if self.kind in DISTANCE_KINDS:
            payload = (self.d_max, self.d_min, self.indices)
        elif self.kind == "affine":
            payload = (self.A.tobytes(), self.b.tobytes())
        else:
            payload = id(self.evaluator)
        return (self.kind, self.participants, payload)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"kind": self.kind, "participants": list(self.participants)}
        if self.kind == "connectivity":
            data["d_max"] = self.d_max
        elif self.kind == "collision":
            data["d_min"] = self.d_min
        elif self.kind == "affine":
            data["A"] = self.A.tolist()
            data["b"] = self.b.tolist()
        else:
            data["lipschitz"] = self.lipschitz
        if self.indices is not None:
            data["indices"] = list(self.indices)
        return data


def connectivity(i: int, j: int, d_max: float, indices: Sequence[int] = (0, 1)) -> ConstraintSpec:
    return ConstraintSpec("connectivity", (i, j), d_max=d_max, indices=tuple(indices))


def collision(i: int, j: int, d_min: float, indices: Sequence[int] = (0, 1)) -> ConstraintSpec:
    return ConstraintSpec("collision", (i, j), d_min=d_min, indices=tuple(indices))


def constraint_from_dict(data: Mapping[str, Any]) -> ConstraintSpec:
    kind = data.get("kind")
    participants = tuple(data.get("participants", ()))
    indices = data.get("indices", (0, 1) if kind in DISTANCE_KINDS else None)
    if kind == "custom":
        raise ScenarioError("custom constraints cannot be declared in scenario files")
    return ConstraintSpec(
        kind,
        participants,
        d_max=data.get("d_max"),
        d_min=data.get("d_min"),
        A=data.get("A"),
        b=data.get("b"),
        indices=None if indices is None else tuple(indices),
        name=data.get("name", ""),
    )


# ---------------------------------------------------------------------------
# Evaluation and tightening
# ---------------------------------------------------------------------------

def _ordered(c: ConstraintSpec, states: Union[Mapping[int, Any], Sequence[Any]]) -> list[np.ndarray]:
    if isinstance(states, Mapping):
        missing = [p for p in c.participants if p not in states]
        if missing:
            raise ScenarioError(f"missing state for participant(s) {missing} of {c.label}")
        return [np.asarray(states[p], dtype=float) for p in c.participants]
    if len(states) != len(c.participants):
        raise ScenarioError(f"{c.label} needs {len(c.participants)} states, got {len(states)}")
    return [np.asarray(s, dtype=float) for s in states]


def eval_constraint(c: ConstraintSpec, states: Union[Mapping[int, Any], Sequence[Any]]) -> np.ndarray:
    """Constraint values; nonpositive entries are satisfied.

    States may be single vectors or equally shaped batches of vectors.
    """
    xs = _ordered(c, states)
    if c.kind in DISTANCE_KINDS:
        idx = list(c.indices)
        dist = np.linalg.norm(xs[0][..., idx] - xs[1][..., idx], axis=-1)
        value = dist - c.d_max if c.kind == "connectivity" else c.d_min - dist
        return np.atleast_1d(value)
    if c.kind == "affine":
        stacked = np.concatenate(xs, axis=-1)
        return stacked @ c.A.T - c.b
    return np.atleast_1d(np.asarray(c.evaluator(*xs), dtype=float))


def _summands(s: SetSummands) -> Sequence[SetDescriptor]:
    return (s,) if hasattr(s, "dim") else tuple(s)


def tightening_scalars(c: ConstraintSpec, sets: Union[Mapping[int, SetSummands], Sequence[SetSummands]]) -> Any:
    """Margin that makes the constraint hold for every point of the inflated sets.

    ``sets`` gives, per participant, the deviation set around its center (or
    a tuple of Minkowski summands whose maximal distances add up). For
    distance and custom constraints the result is ``C`` times the maximal
    distance over the product of the sets, combined as a sum (default) or a
    Euclidean norm over participants. Affine constraints get one exact margin
    per row.
    """
    per = _ordered_sets(c, sets)
    if c.kind == "affine":
        margins = np.zeros(c.A.shape[0])
        offset = 0
        for summands in per:
            n = summands[0].dim
            block = c.A[:, offset:offset + n]
            margins += np.array([sum(support(s, row) for s in summands) for row in block])
            offset += n
        return margins
    dists = []
    for summands in per:
        d = 0.0
        for s in summands:
            proj = project(s, c.indices) if c.indices is not None else s
            d += max_point_distance(np.zeros(proj.dim), proj)
        dists.append(d)
    combined = sum(dists) if c.lipschitz_norm == "sum" else float(np.linalg.norm(dists))
    return c.lipschitz * combined


def _ordered_sets(c: ConstraintSpec, sets: Any) -> list[Sequence[SetDescriptor]]:
    if isinstance(sets, Mapping):
        missing = [p for p in c.participants if p not in sets]
        if missing:
            raise ScenarioError(f"missing set for participant(s) {missing} of {c.label}")
        return [_summands(sets[p]) for p in c.participants]
    if len(sets) != len(c.participants):
        raise ScenarioError(f"{c.label} needs {len(c.participants)} sets, got {len(sets)}")
    return [_summands(s) for s in sets]


def check_tightened(c: ConstraintSpec, centers: Union[Mapping[int, Any], Sequence[Any]], tighten: Any) -> bool:
    """True if the constraint holds at ``centers`` with margin ``tighten``."""
    return bool(np.all(eval_constraint(c, centers) <= -np.asarray(tighten) + 1e-12))


def sampled_violation(c: ConstraintSpec, centers: Mapping[int, Any], sets: Mapping[int, SetSummands],
                      rng: np.random.Generator, count: int = 1000) -> float:
    """Largest constraint value over random points of the inflated participant sets."""
    from tubedmpc.setgeom import sample

    batch = {}
    for p in c.participants:
        pts = np.repeat(np.asarray(centers[p], dtype=float)[None, :], count, axis=0)
        for s in _summands(sets[p]):
            pts = pts + sample(s, rng, count)
        batch[p] = pts
    return float(np.max(eval_constraint(c, batch)))


# ---------------------------------------------------------------------------
# Coupling graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingGraph:
    """Undirected coupling topology induced by the constraints."""

    agents: tuple[int, ...]
    constraints: tuple[ConstraintSpec, ...]
    edges: frozenset = frozenset()

    @classmethod
    def build(cls, agents: Iterable[int], constraints: Iterable[ConstraintSpec]) -> "CouplingGraph":
        agents = tuple(sorted(agents))
        merged: dict[tuple, ConstraintSpec] = {}
        for c in constraints:
            unknown = [p for p in c.participants if p not in agents]
            if unknown:
                raise ScenarioError(f"{c.label} refers to unknown agent(s) {unknown}")
            merged.setdefault(c.key, c)
        edges = set()
        for c in merged.values():
            for i, j in itertools.combinations(c.participants, 2):
                edges.add(frozenset((i, j)))
        return cls(agents, tuple(merged.values()), frozenset(edges))

    @classmethod
    def from_agent_lists(cls, agents: Iterable[int],
                         per_agent: Mapping[int, Iterable[ConstraintSpec]]) -> "CouplingGraph":
        """Build from per-agent declarations, mirroring every coupled constraint
        to all of its participants."""
        declared: list[ConstraintSpec] = []
        for i, cons in per_agent.items():
            for c in cons:
                if i not in c.participants:
                    raise ScenarioError(f"agent {i} declares {c.label} without participating in it")
                declared.append(c)
        graph = cls.build(agents, declared)
        added = sum(len(c.participants) for c in graph.constraints) - len(declared)
        if added > 0:
            logger.info("mirrored %d coupled constraint declaration(s) to neighbors", added)
        return graph

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Constraints only involve declared agents and couple mutual neighbors only."""
        agents = set(self.agents)
        if len(agents) != len(self.agents):
            raise ScenarioError("agent ids must be distinct")
        for e in self.edges:
            if len(e) != 2 or not e <= agents:
                raise ScenarioError(f"edge {sorted(e)} must join two declared agents")
        for c in self.constraints:
            unknown = [p for p in c.participants if p not in agents]
            if unknown:
                raise ScenarioError(f"{c.label} refers to unknown agent(s) {unknown}")
            for i, j in itertools.combinations(c.participants, 2):
                if frozenset((i, j)) not in self.edges:
                    raise ScenarioError(f"{c.label} couples agents {i} and {j}, which are not neighbors")
        for e in self.edges:
            if not any(e <= set(c.participants) for c in self.constraints if c.coupled):
                raise ScenarioError(f"edge {sorted(e)} carries no coupled constraint")

    def neighbors(self, i: int) -> list[int]:
        out = set()
        for e in self.edges:
            if i in e:
                out |= set(e)
        out.discard(i)
        return sorted(out)

    def constraints_of(self, i: int) -> list[ConstraintSpec]:
        return [c for c in self.constraints if i in c.participants]

    def local_of(self, i: int) -> list[ConstraintSpec]:
        return [c for c in self.constraints if c.participants == (i,)]

    def coupled_of(self, i: int) -> list[ConstraintSpec]:
        return [c for c in self.constraints if c.coupled and i in c.participants]

    @property
    def max_degree(self) -> int:
        return max((len(self.neighbors(i)) for i in self.agents), default=0)


def linearize_constraint(c: ConstraintSpec, states: Mapping[int, Any], wrt: int,
                         eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Values and gradient with respect to participant ``wrt``.

    States may be batches of shape ``(T, n)``; the result then has shapes
    ``(T, rows)`` and ``(T, rows, n)``. Distance and affine constraints are
    differentiated analytically, custom ones by central differences.
    """
    xs = {p: np.atleast_2d(np.asarray(states[p], dtype=float)) for p in c.participants}
    T, n = xs[wrt].shape
    values = np.asarray(eval_constraint(c, xs)).reshape(T, -1)
    rows = values.shape[1]
    grad = np.zeros((T, rows, n))
    if c.kind in DISTANCE_KINDS:
        other = c.participants[1] if c.participants[0] == wrt else c.participants[0]
        idx = list(c.indices)
        diff = xs[wrt][:, idx] - xs[other][:, idx]
        norm = np.linalg.norm(diff, axis=1, keepdims=True)
        unit = np.where(norm > 1e-12, diff / np.maximum(norm, 1e-300), 0.0)
        unit[norm[:, 0] <= 1e-12, 0] = 1.0
        sign = 1.0 if c.kind == "connectivity" else -1.0
        grad[:, 0, idx] = sign * unit
    elif c.kind == "affine":
        offset = 0
        for p in c.participants:
            width = xs[p].shape[1]
            if p == wrt:
                grad[:] = c.A[:, offset:offset + width]
            offset += width
    else:
        for col in range(n):
            plus = dict(xs)
            minus = dict(xs)
            step = np.zeros(n)
            step[col] = eps
            plus[wrt] = xs[wrt] + step
            minus[wrt] = xs[wrt] - step
            hi = eval_constraint(c, plus).reshape(T, rows)
            lo = eval_constraint(c, minus).reshape(T, rows)
            grad[:, :, col] = (hi - lo) / (2 * eps)
    return values, grad
