from __future__ import annotations


class InfeasibleError(RuntimeError):
    """A stage proved (or heuristically concluded) that no feasible allocation exists."""

    def __init__(self, stage: str, reason: str):
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.reason = reason


class SolverError(RuntimeError):
    """The numerical solver failed for reasons other than infeasibility."""


class InvariantError(RuntimeError):
    """An internal mathematical invariant was breached (e.g. non-monotone SCA trace)."""


class TopologyError(ValueError):
    """The AP-user association is unusable (e.g. a user with no serving AP)."""
