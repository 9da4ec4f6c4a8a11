"""Error dynamics, RPI sets and tightened constraint sets.

The auxiliary controller makes the deviation ``p = x - x_hat`` between actual
and nominal state follow ``p' = Lambda p + w``. Its exact discretization gives
the error dynamics the RPI set is computed for; the inputs the auxiliary
controller may use are bounded by ``delta_u``, and the nominal input set is
tightened accordingly.
"""

import logging
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from tubedmpc.errors import InitializationError, RpiError
from tubedmpc.model import LinearLTI, ModelKind, OmniRobot, error_discretization, rotation
from tubedmpc.setgeom import (
    TOL,
    Box,
    EmptySet,
    HPolytope,
    SetDescriptor,
    as_hpolytope,
    bounding_box,
    is_zero,
    linear_map,
    minkowski_sum,
    pontryagin_diff,
    rotation_union_outer_box,
    sample,
    support,
    to_dict,
    vertices,
    violation,
)

logger = logging.getLogger(__name__)

DEFAULT_RPI_EPS = 0.01
RPI_MAX_TERMS = 500
RPI_REPAIR_ROUNDS = 200


# ---------------------------------------------------------------------------
# Auxiliary controller
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AuxiliaryLaw:
    """Auxiliary feedback ``K(x, x_hat, u_hat)``.

    For the omni robot the law cancels the input gain, ``K = G(x)^-1 (G(x_hat)
    u_hat + Lambda (x - x_hat)) - u_hat`` with ``G(x) = R(psi) (B^T)^-1 r``. For
    linear models it is the static gain ``pinv(B) (Lambda - A)``.
    """

    model: ModelKind
    lam: np.ndarray

    def __call__(self, x: np.ndarray, x_hat: np.ndarray, u_hat: np.ndarray) -> np.ndarray:
        p = x - x_hat
        if isinstance(self.model, OmniRobot):
            inv_body = np.linalg.inv(self.model.body_map)
            target = self.model.input_gain(x_hat) @ u_hat + self.lam @ p
            return inv_body @ (rotation(-x[2]) @ target) - u_hat
        return self.gain @ p

    @property
    def gain(self) -> np.ndarray:
        model = self.model
        if isinstance(model, OmniRobot):
            raise AttributeError("the omni-robot auxiliary law has no static gain")
        return np.linalg.pinv(model.B) @ (self.lam - model.A)

    def describe(self) -> str:
        if isinstance(self.model, OmniRobot):
            return "K(x, x_hat, u_hat) = G(x)^-1 (G(x_hat) u_hat + Lambda (x - x_hat)) - u_hat"
        return "K(x, x_hat) = pinv(B) (Lambda - A) (x - x_hat)"


# ---------------------------------------------------------------------------
# Ingredients
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TubeIngredients:
    """Per-agent tube data computed once at initialization."""

    lam: np.ndarray
    lam_d: np.ndarray
    W_d: SetDescriptor
    P: SetDescriptor
    delta_u: SetDescriptor
    U: SetDescriptor
    U_hat: SetDescriptor
    aux: AuxiliaryLaw
    rpi_terms: int = 0
    rpi_alpha: float = 0.0

    @property
    def p_bar(self) -> np.ndarray:
        """Per-coordinate half-extent of ``P`` around the origin."""
        eye = np.eye(self.P.dim)
        return np.array([max(support(self.P, e), support(self.P, -e)) for e in eye])

    @property
    def p_bar_pos(self) -> float:
        return float(np.linalg.norm(self.p_bar[:2]))

    def to_dict(self) -> dict[str, Any]:
        U_hat = self.U_hat
        halfspaces = to_dict(as_hpolytope(U_hat)) if isinstance(U_hat, (Box, HPolytope)) else to_dict(U_hat)
        return {
            "lambda": self.lam.tolist(),
            "lambda_d": self.lam_d.tolist(),
            "W_d": to_dict(self.W_d),
            "P": to_dict(self.P),
            "p_bar": self.p_bar.tolist(),
            "delta_u": to_dict(self.delta_u),
            "U": to_dict(self.U),
            "U_hat": halfspaces,
            "aux_law": self.aux.describe(),
            "rpi_terms": self.rpi_terms,
            "rpi_alpha": self.rpi_alpha,
        }


# ---------------------------------------------------------------------------
# RPI set
# ---------------------------------------------------------------------------

def _directions(W: SetDescriptor) -> np.ndarray:
    eye = np.eye(W.dim)
    rows = [eye, -eye]
    if isinstance(W, HPolytope):
        rows.insert(0, W.A / np.linalg.norm(W.A, axis=1, keepdims=True))
    return np.unique(np.round(np.vstack(rows), 12), axis=0)


def _template_set(D: np.ndarray, offsets: np.ndarray) -> SetDescriptor:
    n = D.shape[1]
    if D.shape[0] == 2 * n and np.allclose(np.abs(D).sum(axis=1), 1.0):
        upper = np.array([offsets[np.argmax(D @ e)] for e in np.eye(n)])
        lower = np.array([-offsets[np.argmax(-D @ e)] for e in np.eye(n)])
        return Box(lower, upper, exact=False)
    return HPolytope(D, offsets, exact=False)


def _contraction(lam_power: np.ndarray, W: SetDescriptor, normals: np.ndarray,
                 offsets: np.ndarray) -> float:
    """Smallest alpha with ``lam_power W`` inside ``alpha W``."""
    alpha = 0.0
    for a, b in zip(normals, offsets):
        h = support(W, lam_power.T @ a)
        if b > TOL:
            alpha = max(alpha, h / b)
        elif h > TOL:
            return np.inf
    return alpha


def rpi_outer_approximation(lam_d: Any, W_d: SetDescriptor, eps: float = DEFAULT_RPI_EPS,
                            max_terms: int = RPI_MAX_TERMS) -> tuple[SetDescriptor, int, float]:
    """Outer approximation of the minimal RPI set of ``p+ = lam_d p + w``.

    Finds the smallest ``s`` with ``lam_d^s W_d`` inside ``alpha W_d`` and
    ``alpha <= eps``; the truncated series ``W_d + ... + lam_d^(s-1) W_d``
    scaled by ``1/(1-alpha)`` is returned through its support values in the
    facet normals of ``W_d`` and the coordinate directions, together with
    ``s`` and ``alpha``.
    """
    lam_d = np.atleast_2d(np.asarray(lam_d, dtype=float))
    if is_zero(W_d):
        return Box.zeros(W_d.dim), 0, 0.0
    radius = max(abs(np.linalg.eigvals(lam_d)))
    if radius >= 1.0:
        raise RpiError(f"error dynamics are not Schur stable (spectral radius {radius:.4f})")

    W_poly = as_hpolytope(W_d)
    power = np.eye(lam_d.shape[0])
    alpha = np.inf
    s = 0
    while s < max_terms:
        s += 1
        power = lam_d @ power
        alpha = _contraction(power, W_d, W_poly.A, W_poly.b)
        if alpha <= eps:
            break
    else:
        raise RpiError(f"no contraction alpha <= {eps} within {max_terms} series terms")

    D = _directions(W_d)
    offsets = np.zeros(D.shape[0])
    power = np.eye(lam_d.shape[0])
    for _ in range(s):
        offsets += np.array([support(W_d, power.T @ d) for d in D])
        power = lam_d @ power
    offsets /= 1.0 - alpha

    # the template polytope of the series may miss invariance for coupled
    # dynamics; raise offsets to the image until the inclusion holds
    P = _template_set(D, offsets)
    for _ in range(RPI_REPAIR_ROUNDS):
        image = np.array([support(P, lam_d.T @ d) + support(W_d, d) for d in D])
        worst = float(np.max(image - offsets))
        if worst <= 1e-9:
            break
        offsets = np.maximum(offsets, image)
        P = _template_set(D, offsets)
    else:
        raise RpiError(f"RPI inclusion check failed by {worst:.3e}")
    logger.debug("RPI set after %d terms, alpha=%.4g", s, alpha)
    return P, s, float(alpha)


def compute_rpi(lam_d: Any, W_d: SetDescriptor, eps: float = DEFAULT_RPI_EPS) -> SetDescriptor:
    """RPI set of ``p+ = lam_d p + w`` for ``w`` in ``W_d`` (see rpi_outer_approximation)."""
    return rpi_outer_approximation(lam_d, W_d, eps)[0]


def check_rpi_montecarlo(ti: TubeIngredients, W_d: Optional[SetDescriptor] = None, steps: int = 100_000,
                         seed: int = 0, starts: int = 100, tol: float = TOL) -> dict[str, Any]:
    """Simulate ``p+ = lam_d p + w`` from random starts in ``P`` and count exits."""
    W_d = ti.W_d if W_d is None else W_d
    rng = np.random.default_rng(seed)
    p = sample(ti.P, rng, starts) if not is_zero(ti.P) else np.zeros((starts, ti.P.dim))
    worst = -np.inf
    exits = 0
    for _ in range(steps):
        w = sample(W_d, rng, starts) if not is_zero(W_d) else 0.0
        p = p @ ti.lam_d.T + w
        v = violation(ti.P, p)
        exits += int(np.count_nonzero(v > tol))
        worst = max(worst, float(v.max()))
    return {"steps": steps, "starts": starts, "exits": exits, "max_violation": worst}


# ---------------------------------------------------------------------------
# Tightening
# ---------------------------------------------------------------------------

def _max_planar_speed(model: OmniRobot, U: SetDescriptor) -> float:
    body = np.linalg.inv(model.B.T)
    verts = vertices(U if isinstance(U, Box) else bounding_box(U))
    return float(np.max(np.linalg.norm(verts @ body.T[:, :2], axis=1)))


def compute_delta_u(lam: Any, P: SetDescriptor, model: ModelKind, U: Optional[SetDescriptor] = None,
                    include_mismatch: bool = True) -> SetDescriptor:
    """Outer approximation of all inputs the auxiliary law can take for ``p`` in ``P``.

    For the omni robot the feedback term is ``B^T / r`` applied to the rotation
    union of ``Lambda P``. With ``include_mismatch`` and an input set ``U`` the
    heading mismatch between actual and nominal state adds a box bounded by
    ``2 sin(p3/2)`` times the largest planar body speed reachable in ``U``.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if isinstance(model, OmniRobot):
        Q = rotation_union_outer_box(linear_map(lam, P))
        delta = linear_map(model.B.T / model.r, Q)
        if include_mismatch and U is not None and not is_zero(P):
            p3 = min(max(support(P, [0, 0, 1]), support(P, [0, 0, -1])), np.pi)
            m = 2.0 * np.sin(p3 / 2.0) * _max_planar_speed(model, U)
            delta = minkowski_sum(delta, linear_map(model.B.T, Box.symmetric([m, m, 0.0])))
        return delta
    gain = AuxiliaryLaw(model, lam).gain
    return linear_map(gain, P)


def tighten_state(X: SetDescriptor, P: SetDescriptor) -> SetDescriptor:
    return pontryagin_diff(X, P)


def tighten_input(U: SetDescriptor, delta_u: SetDescriptor) -> SetDescriptor:
    return pontryagin_diff(U, delta_u)


def build_tube(model: ModelKind, lam: Any, W: SetDescriptor, U: SetDescriptor, dt: float,
               eps: float = DEFAULT_RPI_EPS, include_mismatch: bool = True) -> TubeIngredients:
    """Run the tube pipeline: discretize, RPI set, input usage, tightened input set.

    For discrete-time linear models ``lam`` is already the discrete error
    matrix and ``W`` the discrete disturbance set.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if isinstance(model, LinearLTI) and model.discrete:
        lam_d, W_d = lam, W
    else:
        lam_d, gamma = error_discretization(lam, dt)
        W_d = linear_map(gamma, W)
    try:
        P, terms, alpha = rpi_outer_approximation(lam_d, W_d, eps)
    except RpiError as exc:
        raise InitializationError(2, str(exc)) from exc
    delta_u = compute_delta_u(lam, P, model, U, include_mismatch)
    U_hat = tighten_input(U, delta_u)
    if isinstance(U_hat, EmptySet):
        raise InitializationError(2, "tightened input set is empty (disturbance too large)")
    return TubeIngredients(lam, lam_d, W_d, P, delta_u, U, U_hat, AuxiliaryLaw(model, lam), terms, alpha)
