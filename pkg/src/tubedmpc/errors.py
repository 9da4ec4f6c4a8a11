"""Exception hierarchy for tubedmpc.

Every error raised on purpose by the library derives from TubeDmpcError so the
CLI can turn it into a one-line ``Error: ...`` message.
"""

from typing import Any, Optional


class TubeDmpcError(Exception):
    """Base class for all tubedmpc errors."""


class DimensionMismatch(TubeDmpcError, ValueError):
    """Sets, vectors or matrices with incompatible shapes."""


class UnsupportedSetOperation(TubeDmpcError):
    """A set operation that is not available for the given variants."""


class UnboundedSetError(TubeDmpcError):
    """An operation that needs a bounded set received an unbounded one."""


class RpiError(TubeDmpcError):
    """The RPI outer approximation could not be constructed or verified."""


class DareError(TubeDmpcError):
    """The discrete-time algebraic Riccati equation could not be solved."""


class DivergenceError(TubeDmpcError):
    """Integration produced a non-finite state."""


class ScenarioError(TubeDmpcError):
    """Malformed scenario file, override or parameter."""


class InitializationError(TubeDmpcError):
    """An initialization step failed.

    Attributes:
        step: Initialization step number (1-5).
        diagnostic: Human-readable cause.
    """

    def __init__(self, step: int, diagnostic: str):
        self.step = step
        self.diagnostic = diagnostic
        super().__init__(f"initialization step {step} failed: {diagnostic}")


class TheoremViolation(TubeDmpcError):
    """A runtime guarantee (feasibility, tube membership, ...) did not hold.

    Only raised in strict mode; otherwise recorded as an event.
    """

    def __init__(self, kind: str, agent: Optional[int] = None, k: Optional[int] = None,
                 detail: Any = None):
        self.kind = kind
        self.agent = agent
        self.k = k
        self.detail = detail
        where = []
        if agent is not None:
            where.append(f"agent {agent}")
        if k is not None:
            where.append(f"k={k}")
        suffix = f" ({', '.join(where)})" if where else ""
        msg = f"{kind}{suffix}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DeadlockError(TubeDmpcError):
    """A round barrier was reached while a message was still missing."""

    def __init__(self, sender: int, receiver: int, round_key: Any):
        self.sender = sender
        self.receiver = receiver
        self.round_key = round_key
        super().__init__(
            f"agent {receiver} waited for a message from agent {sender} "
            f"in round {round_key} that was never posted"
        )
