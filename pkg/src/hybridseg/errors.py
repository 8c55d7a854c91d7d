"""Exception types shared across the package.

The CLI maps these onto exit codes: config/input problems exit 2,
model/data mismatches exit 3, numeric failures exit 4.
"""


class HybridSegError(Exception):
    """Base class for all package errors."""


class ShapeError(HybridSegError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class InputError(HybridSegError, ValueError):
    """Invalid user-supplied data (empty cloud, duplicate coords, ...)."""


class CoordRangeError(HybridSegError, ValueError):
    """Coordinate does not fit the chosen bits-per-axis budget."""


class MappingError(HybridSegError, ValueError):
    """An index map references entries outside its target."""


class ConsistencyError(HybridSegError, ValueError):
    """Two structures that must describe the same data disagree."""


class ConfigError(HybridSegError, ValueError):
    """Invalid or unknown configuration field."""


class ModelDataMismatch(HybridSegError, ValueError):
    """Checkpoint and dataset disagree (e.g. class counts)."""


class NumericError(HybridSegError, RuntimeError):
    """A computation produced non-finite values."""


class GenerationError(HybridSegError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""
