"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems are handled by the
argument parser, ShapeError/DTypeError/DomainError/ConfigError/
FormatError/DataError all indicate bad data or configuration (exit 2),
and NumericError indicates a numeric failure such as a non-finite value
or a failed verification run (exit 3).
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DTypeError(TypeError):
    """Operand dtypes are unsupported or mismatched (no silent promotion)."""


class DomainError(ValueError):
    """A value lies outside the operation's documented domain."""


class ConfigError(ValueError):
    """A declarative configuration violates one of its invariants."""


class StateError(RuntimeError):
    """An operation was called in the wrong order, e.g. backward without cache."""


class FormatError(ValueError):
    """An on-disk artifact violates its binary or textual format."""


class DataError(ValueError):
    """A dataset or sample is missing required pieces or is inconsistent."""


class DegenerateRangeError(DataError):
    """A calibrated activation range has zero width."""


class NumericError(ArithmeticError):
    """A non-finite value or integer overflow was detected."""
