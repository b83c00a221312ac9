"""Exception types shared across the package.

Invalid arguments raise plain ``ValueError`` everywhere; the classes here
cover failures that can only be detected while solving.
"""


class SolverFailure(RuntimeError):
    """A linear solve failed (singular system or residual check not met)."""


class DecompositionFailure(RuntimeError):
    """An eigendecomposition failed (e.g. the S-form is not positive definite)."""


class PicardNonconvergence(RuntimeError):
    """The Picard loop hit its iteration cap. Carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class InsufficientData(RuntimeError):
    """Too few samples to estimate the requested quantity."""
