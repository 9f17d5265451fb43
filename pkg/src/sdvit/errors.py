"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors come from argument
parsing, DataError/ConfigError exit with 2, InternalError with 3.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InputError(ValueError):
    """A value-level precondition was violated (bad label, tau <= 0, ...)."""


class DataError(RuntimeError):
    """On-disk artifact is malformed: bad manifest, checksum, truncation."""


class ConfigError(RuntimeError):
    """Experiment or model configuration is invalid."""


class InternalError(RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""
