"""Exception types shared across the package.

The CLI maps each one to a stable exit code (see ``lpgflow.cli``).
"""


class ContractViolation(ValueError):
    """A precondition on an operation's inputs was not met."""


class DimensionMismatch(ContractViolation):
    """Adapter, checkpoint or tensor dimensions do not line up."""


class NumericFault(ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CorruptFile(IOError):
    """A checkpoint or adapter file failed magic, version or size checks."""


class FallbackToRandomMask(Exception):
    """Matching-based masking had too few usable correspondences.

    Callers are expected to substitute a random polygon mask.
    """
