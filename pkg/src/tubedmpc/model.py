"""Subsystem models, RK4 discretization and disturbance handling.

Two model kinds are supported: the three-wheeled omni-directional robot
(position, heading; wheel speeds as inputs) and generic linear time-invariant
systems. All vector fields are vectorized over leading array dimensions so the
certification code can push whole sample batches through one call.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np
from scipy.linalg import expm

from tubedmpc.errors import DimensionMismatch, DivergenceError, ScenarioError
from tubedmpc.setgeom import SetDescriptor, contains, linear_map, sample

logger = logging.getLogger(__name__)

DEFAULT_CONTROL_SUBSTEPS = 10

_C30 = np.cos(np.pi / 6)
_S30 = np.sin(np.pi / 6)


# ---------------------------------------------------------------------------
# Model kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OmniRobot:
    """Kinematic three-wheeled omni-directional robot.

    State ``(x, y, psi)``, input = wheel angular velocities, additive
    disturbance on all three state derivatives.
    """

    l: float = 0.2
    r: float = 0.02
    kind = "omni"
    discrete = False

    def __post_init__(self):
        if self.l <= 0 or self.r <= 0:
            raise ScenarioError("robot body radius l and wheel radius r must be positive")

    @property
    def state_dim(self) -> int:
        return 3

    @property
    def input_dim(self) -> int:
        return 3

    @property
    def disturbance_dim(self) -> int:
        return 3

    @property
    def B(self) -> np.ndarray:
        l = self.l
        return np.array([[0.0, _C30, -_C30], [-1.0, _S30, _S30], [l, l, l]])

    @property
    def body_map(self) -> np.ndarray:
        """``(B^T)^-1 r``: wheel speeds to body-frame velocity."""
        return np.linalg.inv(self.B.T) * self.r

    def field(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        v = u @ self.body_map.T
        psi = x[..., 2]
        c, s = np.cos(psi), np.sin(psi)
        out = np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1], v[..., 2]], axis=-1)
        return out + w

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = u @ self.body_map.T
        psi = x[..., 2]
        c, s = np.cos(psi), np.sin(psi)
        fx = np.zeros(x.shape + (3,))
        fx[..., 0, 2] = -s * v[..., 0] - c * v[..., 1]
        fx[..., 1, 2] = c * v[..., 0] - s * v[..., 1]
        return fx, rotation(psi) @ self.body_map

    def input_gain(self, x: np.ndarray) -> np.ndarray:
        """``G(x) = R(psi) (B^T)^-1 r`` for one state."""
        return rotation(x[2]) @ self.body_map

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "omni", "l": self.l, "r": self.r}


@dataclass(frozen=True, eq=False)
class LinearLTI:
    """Linear subsystem ``x' = A x + B u + w`` (continuous) or ``x+ = A x + B u + w``."""

    A: np.ndarray
    B: np.ndarray
    discrete: bool = False
    kind = "lti"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch("LTI matrix A must be square")
        if B.shape[0] != A.shape[0]:
            raise DimensionMismatch("LTI matrix B must have as many rows as A")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def disturbance_dim(self) -> int:
        return self.A.shape[0]

    def field(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return x @ self.A.T + u @ self.B.T + w

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lead = np.shape(x)[:-1]
        return np.broadcast_to(self.A, lead + self.A.shape), np.broadcast_to(self.B, lead + self.B.shape)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "lti", "A": self.A.tolist(), "B": self.B.tolist(), "discrete": self.discrete}


ModelKind = Union[OmniRobot, LinearLTI]


def rotation(psi: Any) -> np.ndarray:
    """Planar rotation acting on the first two of three coordinates.

    An array of angles gives a stack of matrices.
    """
    psi = np.asarray(psi, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    out = np.zeros(psi.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def omni_robot_field(x: Any, u: Any, w: Any, l: float, r: float) -> np.ndarray:
    """``R(psi) (B^T)^-1 r u + w``."""
    return OmniRobot(l, r).field(np.asarray(x, float), np.asarray(u, float), np.asarray(w, float))


def model_from_dict(data: dict[str, Any]) -> ModelKind:
    kind = data.get("kind", "omni")
    if kind == "omni":
        return OmniRobot(float(data.get("l", 0.2)), float(data.get("r", 0.02)))
    if kind == "lti":
        return LinearLTI(data["A"], data["B"], bool(data.get("discrete", False)))
    raise ScenarioError(f"unknown model kind: {kind!r}")


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubsystemDynamics:
    """A model with its sampling time and RK4 substep count.

    The same substep count is used for nominal predictions and for the closed
    loop, which evaluates the auxiliary controller once per RK4 stage.
    """

    model: ModelKind
    dt: float
    substeps: int = DEFAULT_CONTROL_SUBSTEPS

    def __post_init__(self):
        if self.dt <= 0:
            raise ScenarioError("sampling time dt must be positive")
        if self.substeps < 1:
            raise ScenarioError("substeps must be at least 1")

    @property
    def state_dim(self) -> int:
        return self.model.state_dim

    @property
    def input_dim(self) -> int:
        return self.model.input_dim

    def step(self, x: Any, u: Any, w: Any = None) -> np.ndarray:
        return rk4_step(self, x, u, w)

    def linearize(self, x: Any, u: Any) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return rk4_step_with_jacobians(self, x, u)


def _disturbance_path(w: Any, shape: tuple, substeps: int) -> list[np.ndarray]:
    if w is None:
        return [np.zeros(shape)] * substeps
    w = np.asarray(w, dtype=float)
    if w.ndim == len(shape) + 1 and w.shape[0] == substeps:
        return [w[j] for j in range(substeps)]
    return [np.broadcast_to(w, shape)] * substeps


def _check_finite(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DivergenceError("integration produced a non-finite state")
    return x


def rk4_step(dyn: SubsystemDynamics, x: Any, u: Any, w: Any = None, dt: Optional[float] = None,
             substeps: Optional[int] = None) -> np.ndarray:
    """Classical RK4 over one sampling interval with a zero-order-hold input.

    ``w`` is either constant over the step or a ``(substeps, q)`` array that
    is held constant over each substep. Discrete-time LTI models are stepped
    exactly instead.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    model = dyn.model
    if model.discrete:
        w0 = np.zeros(x.shape) if w is None else np.broadcast_to(np.asarray(w, float), x.shape)
        return _check_finite(model.field(x, u, w0))
    n_sub = dyn.substeps if substeps is None else substeps
    h = (dyn.dt if dt is None else dt) / n_sub
    for wj in _disturbance_path(w, x.shape, n_sub):
        k1 = model.field(x, u, wj)
        k2 = model.field(x + 0.5 * h * k1, u, wj)
        k3 = model.field(x + 0.5 * h * k2, u, wj)
        k4 = model.field(x + h * k3, u, wj)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _check_finite(x)


def rk4_step_with_jacobians(dyn: SubsystemDynamics, x: Any, u: Any) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nominal RK4 step and its exact Jacobians with respect to ``x`` and ``u``.

    The sensitivities are propagated through every RK4 stage, so the returned
    matrices are the derivatives of the discrete map actually used.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    model = dyn.model
    n, m = x.shape[-1], u.shape[-1]
    lead = x.shape[:-1]
    if model.discrete:
        fx, fu = model.jacobians(x, u)
        return model.field(x, u, np.zeros(x.shape)), np.array(fx), np.array(fu)
    h = dyn.dt / dyn.substeps
    w0 = np.zeros(x.shape)
    Sx = np.broadcast_to(np.eye(n), lead + (n, n)).copy()
    Su = np.zeros(lead + (n, m))
    for _ in range(dyn.substeps):
        stages = []
        xs, Sxs, Sus = x, Sx, Su
        for coeff in (0.5, 0.5, 1.0, None):
            k = model.field(xs, u, w0)
            fx, fu = model.jacobians(xs, u)
            dkx = fx @ Sxs
            dku = fx @ Sus + fu
            stages.append((k, dkx, dku))
            if coeff is not None:
                xs = x + coeff * h * k
                Sxs = Sx + coeff * h * dkx
                Sus = Su + coeff * h * dku
        (k1, a1, b1), (k2, a2, b2), (k3, a3, b3), (k4, a4, b4) = stages
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Sx = Sx + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        Su = Su + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return _check_finite(x), Sx, Su


@dataclass
class ClosedLoopStep:
    """Result of one sampling interval of the actual closed loop."""

    x: np.ndarray
    x_hat: np.ndarray
    u_applied: np.ndarray
    u_stages: np.ndarray = field(repr=False)


AuxLaw = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def closed_loop_step(dyn: SubsystemDynamics, x: Any, x_hat: Any, u_hat: Any, aux: AuxLaw,
                     w: Any = None) -> ClosedLoopStep:
    """Integrate actual and nominal state together under ``u = u_hat + K(x, x_hat, u_hat)``.

    The auxiliary law is re-evaluated at every RK4 stage of every substep. The
    nominal part of the integration uses exactly the operations of
    :func:`rk4_step`, so it reproduces the nominal prediction bitwise.
    """
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    u_hat = np.asarray(u_hat, dtype=float)
    model = dyn.model
    u_first = u_hat + aux(x, x_hat, u_hat)
    if model.discrete:
        w0 = np.zeros(x.shape) if w is None else np.asarray(w, float)
        x_next = model.field(x, u_first, w0)
        x_hat_next = model.field(x_hat, u_hat, np.zeros(x.shape))
        return ClosedLoopStep(_check_finite(x_next), x_hat_next, u_first, u_first[None, :])

    h = dyn.dt / dyn.substeps
    zero = np.zeros(x.shape)
    used = []

    def stage(xs: np.ndarray, xhs: np.ndarray, wj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        us = u_hat + aux(xs, xhs, u_hat)
        used.append(us)
        return model.field(xs, us, wj), model.field(xhs, u_hat, zero)

    for wj in _disturbance_path(w, x.shape, dyn.substeps):
        k1, q1 = stage(x, x_hat, wj)
        k2, q2 = stage(x + 0.5 * h * k1, x_hat + 0.5 * h * q1, wj)
        k3, q3 = stage(x + 0.5 * h * k2, x_hat + 0.5 * h * q2, wj)
        k4, q4 = stage(x + h * k3, x_hat + h * q3, wj)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        x_hat = x_hat + (h / 6.0) * (q1 + 2.0 * q2 + 2.0 * q3 + q4)
    return ClosedLoopStep(_check_finite(x), _check_finite(x_hat), u_first, np.array(used))


def error_discretization(lam: Any, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """``(e^{Lambda dt}, int_0^dt e^{Lambda tau} dtau)`` from one augmented exponential."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    n = lam.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = lam
    aug[:n, n:] = np.eye(n)
    E = expm(aug * dt)
    if not np.all(np.isfinite(E)):
        raise DivergenceError("matrix exponential is not finite")
    return E[:n, :n], E[:n, n:]


def discretize_disturbance(lam: Any, W: SetDescriptor, dt: float) -> SetDescriptor:
    """Image of ``W`` under ``int_0^dt e^{Lambda tau} dtau``."""
    if dt <= 0:
        raise ScenarioError("dt must be positive")
    _, gamma = error_discretization(lam, dt)
    return linear_map(gamma, W)


# ---------------------------------------------------------------------------
# Disturbances and equilibria
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DisturbanceSpec:
    """Continuous disturbance set, its discretized image and a sampler."""

    continuous_set: SetDescriptor
    discrete_set: SetDescriptor
    scale: float = 1.0

    def __post_init__(self):
        for s in (self.continuous_set, self.discrete_set):
            if not contains(s, np.zeros(s.dim)):
                raise ScenarioError("disturbance sets must contain the origin")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.scale == 0.0:
            return np.zeros(self.continuous_set.dim)
        return self.scale * sample(self.continuous_set, rng, 1)[0]


def steady_input(model: ModelKind, xi: Any) -> np.ndarray:
    """Input keeping the nominal model at rest in ``xi``."""
    xi = np.asarray(xi, dtype=float)
    if isinstance(model, OmniRobot):
        return np.zeros(3)
    drift = (model.A - np.eye(model.state_dim)) @ xi if model.discrete else model.A @ xi
    u, *_ = np.linalg.lstsq(model.B, -drift, rcond=None)
    if np.linalg.norm(model.B @ u + drift) > 1e-8:
        raise ScenarioError(f"target {xi.tolist()} is not an equilibrium of the linear model")
    return u
