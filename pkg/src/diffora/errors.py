"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DifforaError(Exception):
    """Base class for all package errors."""


class DimensionError(DifforaError):
    """Operands have incompatible or degenerate dimensions."""


class ShapeError(DimensionError):
    """Matrix fails a structural requirement (square, symmetric, ...)."""


class RankError(DimensionError):
    """Requested adapter rank exceeds what the module shape allows."""


class NormalizationError(DifforaError):
    """Input columns violate the unit-norm requirement of the theory path."""


class DefinitenessError(DifforaError):
    """Matrix is not positive definite; carries the offending eigenvalue."""

    def __init__(self, message: str, eigenvalue: float):
        super().__init__(f"{message} (min eigenvalue {eigenvalue:.6e})")
        self.eigenvalue = eigenvalue


class ConfigError(DifforaError):
    """Invalid run configuration."""


class DataError(DifforaError):
    """Dataset or batch unusable (empty, mismatched, ...)."""


class DivergenceError(DifforaError):
    """Training produced a non-finite loss; carries the failing step index."""

    def __init__(self, message: str, step: int, last_losses: tuple[float, ...] = ()):
        super().__init__(f"{message} at step {step}")
        self.step = step
        self.last_losses = last_losses


class FeasibilityError(DifforaError):
    """Generator could not satisfy its constraints within the attempt budget."""


class ParseError(DifforaError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


class SharingError(DifforaError):
    """Module family shapes are inconsistent across layers."""


class DomainError(DifforaError):
    """Numeric argument outside the mathematical domain of the operation."""
