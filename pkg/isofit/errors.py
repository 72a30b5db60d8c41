# isofit/errors.py
from __future__ import annotations


class IsofitError(Exception):
    """Base class for every error raised by the package."""


class ContractViolation(IsofitError, ValueError):
    """A precondition of an operation does not hold (shape, sign, range)."""


class ConfigError(IsofitError):
    """Run config is malformed, has unknown keys or out-of-range values."""


class InputError(IsofitError):
    """An input file is missing or cannot be parsed."""


class ProvenanceError(IsofitError):
    """A mesh was not produced by the grid it is paired with."""


class NumericalAbort(IsofitError):
    """Training had to stop (non-finite loss, empty extraction)."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class OracleFailure(IsofitError):
    """A scoring oracle raised while evaluating a generation."""

    def __init__(self, message: str, generation: int):
        super().__init__(f"{message} (generation {generation})")
        self.generation = generation
