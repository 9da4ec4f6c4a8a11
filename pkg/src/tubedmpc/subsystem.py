"""Per-agent problem data shared by the terminal, OCP and reference-update code."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Optional

import numpy as np

from tubedmpc.errors import DimensionMismatch
from tubedmpc.model import SubsystemDynamics
from tubedmpc.setgeom import SetDescriptor
from tubedmpc.tube import TubeIngredients, tighten_state

if TYPE_CHECKING:
    from tubedmpc.refupdate import ConsistencySets
    from tubedmpc.terminal import TerminalIngredients


@dataclass(frozen=True, eq=False)
class SubsystemSpec:
    """One agent: dynamics, tube, weights, start and target.

    ``terminal`` and ``consistency`` are filled in by later initialization
    steps through :meth:`evolve`.
    """

    agent: int
    dyn: SubsystemDynamics
    tube: TubeIngredients
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    xi: np.ndarray
    u_xi: np.ndarray
    alpha: float
    beta: float
    consistency_indices: tuple[int, ...] = (0, 1)
    X: Optional[SetDescriptor] = None
    terminal: Optional["TerminalIngredients"] = None
    consistency: Optional["ConsistencySets"] = None

    def __post_init__(self):
        n, m = self.dyn.state_dim, self.dyn.input_dim
        for name, value, shape in (("Q", self.Q, (n, n)), ("R", self.R, (m, m)), ("x0", self.x0, (n,)),
                                   ("xi", self.xi, (n,)), ("u_xi", self.u_xi, (m,))):
            arr = np.asarray(value, dtype=float)
            if arr.shape != shape:
                raise DimensionMismatch(f"agent {self.agent}: {name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if np.any(np.linalg.eigvalsh(self.Q) <= 0) or np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise DimensionMismatch(f"agent {self.agent}: weights Q and R must be positive definite")
        object.__setattr__(self, "consistency_indices", tuple(int(i) for i in self.consistency_indices))

    @property
    def state_dim(self) -> int:
        return self.dyn.state_dim

    @property
    def input_dim(self) -> int:
        return self.dyn.input_dim

    @property
    def X_hat(self) -> Optional[SetDescriptor]:
        return None if self.X is None else tighten_state(self.X, self.tube.P)

    def stage_cost(self, x: Any, u: Any) -> np.ndarray:
        """``||x - xi||_Q^2 + ||u - u_xi||_R^2``, vectorized over leading dimensions."""
        dx = np.asarray(x, dtype=float) - self.xi
        du = np.asarray(u, dtype=float) - self.u_xi
        return np.einsum("...i,ij,...j->...", dx, self.Q, dx) + np.einsum("...i,ij,...j->...", du, self.R, du)

    def evolve(self, **changes: Any) -> "SubsystemSpec":
        return dataclasses.replace(self, **changes)
