"""Compact convex sets and the set arithmetic behind tubes and tightening.

Four immutable variants are supported: axis-aligned ``Box``, ``HPolytope``
(``A x <= b``), Euclidean ``Ball`` and ``EmptySet``. Every non-empty set carries
an ``exact`` flag; it is False whenever the set is an outer approximation of
the quantity it stands for, so callers can check that approximations only
ever err on the conservative side.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Any, Sequence, Union

import numpy as np
from scipy.optimize import linprog

from tubedmpc.errors import DimensionMismatch, UnboundedSetError, UnsupportedSetOperation

logger = logging.getLogger(__name__)

TOL = 1e-9


def _frozen(values: Any, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=ndim)
    if not np.all(np.isfinite(arr)):
        raise ValueError("set data must be finite")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Set variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``{x | lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray
    exact: bool = True

    def __post_init__(self):
        lower = _frozen(self.lower, 1)
        upper = _frozen(self.upper, 1)
        if lower.shape != upper.shape:
            raise DimensionMismatch(f"box bounds of shape {lower.shape} and {upper.shape}")
        if np.any(lower > upper + TOL):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def symmetric(cls, halfwidths: Sequence[float], center: Any = None,
                  exact: bool = True) -> "Box":
        h = np.abs(np.asarray(halfwidths, dtype=float))
        c = np.zeros_like(h) if center is None else np.asarray(center, dtype=float)
        return cls(c - h, c + h, exact)

    @classmethod
    def zeros(cls, dim: int) -> "Box":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidths(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)


@dataclass(frozen=True, eq=False)
class HPolytope:
    """Polyhedron ``{x | A x <= b}``; no row of ``A`` may vanish."""

    A: np.ndarray
    b: np.ndarray
    exact: bool = True

    def __post_init__(self):
        A = _frozen(self.A, 2)
        b = _frozen(self.b, 1)
        if A.shape[0] != b.shape[0]:
            raise DimensionMismatch(f"H-representation with {A.shape[0]} rows and {b.shape[0]} offsets")
        if np.any(np.linalg.norm(A, axis=1) <= TOL):
            raise ValueError("H-representation contains a zero row")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True, eq=False)
class Ball:
    """Euclidean ball ``{x | ||x - center|| <= radius}``."""

    center: np.ndarray
    radius: float
    exact: bool = True

    def __post_init__(self):
        center = _frozen(self.center, 1)
        radius = float(self.radius)
        if not np.isfinite(radius) or radius < 0:
            raise ValueError("ball radius must be finite and nonnegative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", radius)

    @classmethod
    def origin(cls, dim: int, radius: float) -> "Ball":
        return cls(np.zeros(dim), radius)

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass(frozen=True)
class EmptySet:
    """The empty set of a given dimension (a value, not an error)."""

    dim: int
    exact: bool = True


SetDescriptor = Union[Box, HPolytope, Ball, EmptySet]


def _check_dims(a: SetDescriptor, b: SetDescriptor) -> None:
    if a.dim != b.dim:
        raise DimensionMismatch(f"sets of dimension {a.dim} and {b.dim}")


def _check_point(a: SetDescriptor, x: np.ndarray) -> None:
    if x.shape[-1] != a.dim:
        raise DimensionMismatch(f"point of dimension {x.shape[-1]} for a set of dimension {a.dim}")


def is_zero(a: SetDescriptor) -> bool:
    """True if ``a`` is exactly the singleton at the origin."""
    if isinstance(a, Box):
        return bool(np.all(a.lower == 0.0) and np.all(a.upper == 0.0))
    if isinstance(a, Ball):
        return a.radius == 0.0 and bool(np.all(a.center == 0.0))
    return False


def as_hpolytope(a: SetDescriptor) -> HPolytope:
    """H-representation of a box or polytope."""
    if isinstance(a, HPolytope):
        return a
    if isinstance(a, Box):
        eye = np.eye(a.dim)
        return HPolytope(np.vstack([eye, -eye]), np.concatenate([a.upper, -a.lower]), a.exact)
    raise UnsupportedSetOperation(f"{type(a).__name__} has no exact H-representation")


# ---------------------------------------------------------------------------
# Support function, membership, emptiness
# ---------------------------------------------------------------------------

def _lp_max(a: HPolytope, d: np.ndarray) -> float:
    res = linprog(-d, A_ub=a.A, b_ub=a.b, bounds=[(None, None)] * a.dim, method="highs")
    if res.status == 3:
        raise UnboundedSetError("support function is unbounded in the requested direction")
    if res.status == 2:
        return -np.inf
    if res.status != 0:
        raise UnsupportedSetOperation(f"linear program failed: {res.message}")
    return float(-res.fun)


def support(a: SetDescriptor, d: Any) -> float:
    """Support function ``max_{x in a} d^T x``."""
    d = np.asarray(d, dtype=float)
    _check_point(a, d)
    if isinstance(a, Box):
        return float(a.center @ d + a.halfwidths @ np.abs(d))
    if isinstance(a, Ball):
        return float(a.center @ d + a.radius * np.linalg.norm(d))
    if isinstance(a, HPolytope):
        return _lp_max(a, d)
    return -np.inf


def contains(a: SetDescriptor, x: Any, tol: float = TOL) -> Union[bool, np.ndarray]:
    """Membership up to ``tol``; ``x`` may be one point or an array of points."""
    x = np.asarray(x, dtype=float)
    _check_point(a, x)
    if isinstance(a, Box):
        inside = np.all((x >= a.lower - tol) & (x <= a.upper + tol), axis=-1)
    elif isinstance(a, HPolytope):
        inside = np.all(x @ a.A.T <= a.b + tol, axis=-1)
    elif isinstance(a, Ball):
        inside = np.linalg.norm(x - a.center, axis=-1) <= a.radius + tol
    else:
        inside = np.zeros(x.shape[:-1], dtype=bool)
    return bool(inside) if np.ndim(inside) == 0 else inside


def violation(a: SetDescriptor, x: Any) -> Union[float, np.ndarray]:
    """Largest constraint excess of ``x`` with respect to ``a`` (nonpositive inside)."""
    x = np.asarray(x, dtype=float)
    _check_point(a, x)
    if isinstance(a, Box):
        out = np.max(np.maximum(x - a.upper, a.lower - x), axis=-1)
    elif isinstance(a, HPolytope):
        out = np.max(x @ a.A.T - a.b, axis=-1)
    elif isinstance(a, Ball):
        out = np.linalg.norm(x - a.center, axis=-1) - a.radius
    else:
        out = np.full(x.shape[:-1], np.inf)
    return float(out) if np.ndim(out) == 0 else out


def is_empty(a: SetDescriptor) -> bool:
    if isinstance(a, EmptySet):
        return True
    if isinstance(a, HPolytope):
        res = linprog(np.zeros(a.dim), A_ub=a.A, b_ub=a.b + TOL,
                      bounds=[(None, None)] * a.dim, method="highs")
        return res.status == 2
    return False


def bounding_box(a: SetDescriptor) -> Box:
    """Smallest axis-aligned box containing ``a``."""
    if isinstance(a, Box):
        return a
    if isinstance(a, Ball):
        return Box(a.center - a.radius, a.center + a.radius, exact=a.radius == 0.0)
    if isinstance(a, HPolytope):
        eye = np.eye(a.dim)
        upper = np.array([support(a, e) for e in eye])
        lower = np.array([-support(a, -e) for e in eye])
        return Box(lower, upper, exact=False)
    raise UnsupportedSetOperation("the empty set has no bounding box")


def vertices(a: SetDescriptor) -> np.ndarray:
    """Vertex array of a box or bounded polytope, one vertex per row."""
    if isinstance(a, Box):
        return np.array(list(itertools.product(*zip(a.lower, a.upper))), dtype=float)
    if isinstance(a, HPolytope):
        bounding_box(a)  # raises for unbounded polytopes
        n = a.dim
        found = []
        for rows in itertools.combinations(range(a.A.shape[0]), n):
            sub = a.A[list(rows)]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            v = np.linalg.solve(sub, a.b[list(rows)])
            if np.all(a.A @ v <= a.b + 1e-7):
                found.append(v)
        if not found:
            return np.empty((0, n))
        return np.unique(np.round(np.array(found), 12), axis=0)
    raise UnsupportedSetOperation(f"{type(a).__name__} has no finite vertex set")


def max_point_distance(x: Any, a: SetDescriptor) -> float:
    """``sup_{z in a} ||x - z||`` (Euclidean)."""
    x = np.asarray(x, dtype=float)
    _check_point(a, x)
    if isinstance(a, Box):
        far = np.maximum(np.abs(x - a.lower), np.abs(x - a.upper))
        return float(np.linalg.norm(far))
    if isinstance(a, Ball):
        return float(np.linalg.norm(x - a.center) + a.radius)
    if isinstance(a, HPolytope):
        verts = vertices(a)
        if verts.shape[0] == 0:
            return 0.0
        return float(np.max(np.linalg.norm(verts - x, axis=1)))
    raise UnsupportedSetOperation("max distance to the empty set is undefined")


# ---------------------------------------------------------------------------
# Set arithmetic
# ---------------------------------------------------------------------------

def _support_rows(a: SetDescriptor) -> np.ndarray:
    if isinstance(a, Box):
        eye = np.eye(a.dim)
        return np.vstack([eye, -eye])
    if isinstance(a, HPolytope):
        return a.A
    return np.empty((0, a.dim))


def minkowski_sum(a: SetDescriptor, b: SetDescriptor, approximate: bool = True) -> SetDescriptor:
    """Minkowski sum ``a + b``, exact or a tight outer approximation.

    Box+Box and Ball+Ball are exact. Polytope sums are exact in the plane for
    box/polytope operands and outer approximations otherwise. With
    ``approximate=False`` an inexact result raises UnsupportedSetOperation.
    """
    _check_dims(a, b)
    if isinstance(a, EmptySet) or isinstance(b, EmptySet):
        return EmptySet(a.dim)
    if is_zero(b):
        return a
    if is_zero(a):
        return b

    if isinstance(a, Box) and isinstance(b, Box):
        result: SetDescriptor = Box(a.lower + b.lower, a.upper + b.upper, a.exact and b.exact)
    elif isinstance(a, Ball) and isinstance(b, Ball):
        result = Ball(a.center + b.center, a.radius + b.radius, a.exact and b.exact)
    elif {type(a), type(b)} == {Box, Ball}:
        box, ball = (a, b) if isinstance(a, Box) else (b, a)
        result = Box(box.lower + ball.center - ball.radius,
                     box.upper + ball.center + ball.radius, exact=False)
    else:
        eye = np.eye(a.dim)
        normals = np.vstack([_support_rows(a), _support_rows(b), eye, -eye])
        normals = np.unique(np.round(normals, 12), axis=0)
        offsets = np.array([support(a, d) + support(b, d) for d in normals])
        planar_exact = a.dim <= 2 and not isinstance(a, Ball) and not isinstance(b, Ball)
        result = HPolytope(normals, offsets, planar_exact and a.exact and b.exact)

    if not approximate and not result.exact:
        raise UnsupportedSetOperation(
            f"no exact Minkowski sum for {type(a).__name__} + {type(b).__name__}"
        )
    return result


def pontryagin_diff(a: SetDescriptor, b: SetDescriptor) -> SetDescriptor:
    """Pontryagin difference ``{x | x + y in a for all y in b}``.

    Computed exactly through the support function of ``b``; an empty result
    is returned as EmptySet.
    """
    _check_dims(a, b)
    if isinstance(a, EmptySet):
        return a
    if isinstance(b, EmptySet):
        raise UnsupportedSetOperation("Pontryagin difference with the empty set is unbounded")
    if isinstance(a, Ball):
        raise UnsupportedSetOperation("Pontryagin difference of a ball is not supported")
    if is_zero(b):
        return a

    if isinstance(a, Box):
        eye = np.eye(a.dim)
        upper = a.upper - np.array([support(b, e) for e in eye])
        lower = a.lower + np.array([support(b, -e) for e in eye])
        if np.any(lower > upper + TOL):
            return EmptySet(a.dim)
        return Box(lower, np.maximum(upper, lower), a.exact)

    shrunk = np.array([support(b, row) for row in a.A])
    result = HPolytope(a.A, a.b - shrunk, a.exact)
    if is_empty(result):
        return EmptySet(a.dim)
    return result


def _is_monomial(M: np.ndarray) -> bool:
    nz = np.abs(M) > 0.0
    return M.shape[0] == M.shape[1] and np.all(nz.sum(axis=0) <= 1) and np.all(nz.sum(axis=1) <= 1)


def linear_map(M: Any, a: SetDescriptor) -> SetDescriptor:
    """Image ``{M x | x in a}``, exact where representable, else an outer box."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != a.dim:
        raise DimensionMismatch(f"matrix with {M.shape[1]} columns applied to a set of dimension {a.dim}")
    if isinstance(a, EmptySet):
        return EmptySet(M.shape[0])
    if M.shape[0] == M.shape[1] and np.array_equal(M, np.eye(a.dim)):
        return a

    if isinstance(a, Box):
        c = M @ a.center
        h = np.abs(M) @ a.halfwidths
        exact = a.exact and (_is_monomial(M) or not np.any(a.halfwidths))
        return Box(c - h, c + h, exact)

    if isinstance(a, Ball):
        c = M @ a.center
        gram = M @ M.T
        scale = np.sqrt(gram[0, 0]) if gram.size else 0.0
        if M.shape[0] == M.shape[1] and np.allclose(gram, scale ** 2 * np.eye(M.shape[0])):
            return Ball(c, scale * a.radius, a.exact)
        h = a.radius * np.linalg.norm(M, axis=1)
        return Box(c - h, c + h, exact=not np.any(h))

    if M.shape[0] == M.shape[1] and abs(np.linalg.det(M)) > 1e-12:
        return HPolytope(a.A @ np.linalg.inv(M), a.b, a.exact)
    mapped = vertices(a) @ M.T
    return Box(mapped.min(axis=0), mapped.max(axis=0), exact=False)


def rotation_union_outer_box(a: SetDescriptor) -> Box:
    """Outer box of the union of all planar rotations of ``a``.

    The rotation acts on the first two coordinates of a 3-dimensional set
    (position and heading); the heading interval is kept as it is.
    """
    if a.dim != 3:
        raise UnsupportedSetOperation("rotation union is defined for 3-dimensional sets only")
    if isinstance(a, EmptySet):
        raise UnsupportedSetOperation("rotation union of an empty set")
    if isinstance(a, Box):
        far = np.maximum(np.abs(a.lower[:2]), np.abs(a.upper[:2]))
        rho = float(np.linalg.norm(far))
        lo3, hi3 = a.lower[2], a.upper[2]
    elif isinstance(a, Ball):
        rho = float(np.linalg.norm(a.center[:2]) + a.radius)
        lo3, hi3 = a.center[2] - a.radius, a.center[2] + a.radius
    else:
        verts = vertices(a)
        rho = float(np.max(np.linalg.norm(verts[:, :2], axis=1)))
        lo3, hi3 = verts[:, 2].min(), verts[:, 2].max()
    return Box([-rho, -rho, lo3], [rho, rho, hi3], exact=rho == 0.0 and a.exact)


def project(a: SetDescriptor, indices: Sequence[int]) -> SetDescriptor:
    """Projection onto the coordinates ``indices``."""
    idx = list(indices)
    if isinstance(a, EmptySet):
        return EmptySet(len(idx))
    if isinstance(a, Box):
        return Box(a.lower[idx], a.upper[idx], a.exact)
    if isinstance(a, Ball):
        return Ball(a.center[idx], a.radius, a.exact)
    box = bounding_box(a)
    return Box(box.lower[idx], box.upper[idx], exact=False)


def sample(a: SetDescriptor, rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform samples from ``a`` (rejection from the bounding box for polytopes)."""
    if isinstance(a, Box):
        return rng.uniform(a.lower, a.upper, size=(count, a.dim))
    if isinstance(a, Ball):
        d = rng.standard_normal((count, a.dim))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        r = a.radius * rng.uniform(size=(count, 1)) ** (1.0 / a.dim)
        return a.center + r * d
    if isinstance(a, HPolytope):
        box = bounding_box(a)
        out = []
        for _ in range(1000):
            cand = rng.uniform(box.lower, box.upper, size=(4 * count, a.dim))
            out.extend(cand[contains(a, cand)])
            if len(out) >= count:
                return np.array(out[:count])
        raise UnsupportedSetOperation("rejection sampling did not produce enough points")
    raise UnsupportedSetOperation("cannot sample from the empty set")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def to_dict(a: SetDescriptor) -> dict[str, Any]:
    if isinstance(a, Box):
        return {"type": "box", "lower": a.lower.tolist(), "upper": a.upper.tolist(), "exact": a.exact}
    if isinstance(a, HPolytope):
        return {"type": "hpoly", "A": a.A.tolist(), "b": a.b.tolist(), "exact": a.exact}
    if isinstance(a, Ball):
        return {"type": "ball", "center": a.center.tolist(), "radius": a.radius, "exact": a.exact}
    return {"type": "empty", "dim": a.dim}


def from_dict(data: dict[str, Any]) -> SetDescriptor:
    """Parse a set from its JSON object form.

    Boxes accept either ``lower``/``upper`` or ``halfwidths`` with an optional
    ``center``.
    """
    kind = data.get("type")
    exact = bool(data.get("exact", True))
    if kind == "box":
        if "halfwidths" in data:
            return Box.symmetric(data["halfwidths"], data.get("center"), exact)
        return Box(data["lower"], data["upper"], exact)
    if kind == "hpoly":
        return HPolytope(data["A"], data["b"], exact)
    if kind == "ball":
        center = data.get("center")
        if center is None:
            center = np.zeros(int(data["dim"]))
        return Ball(center, data["radius"], exact)
    if kind == "empty":
        return EmptySet(int(data["dim"]))
    raise ValueError(f"unknown set type: {kind!r}")
