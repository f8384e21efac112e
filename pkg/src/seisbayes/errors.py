"""Exception types shared across the package."""


class SeisBayesError(Exception):
    """Base class for package errors."""


class ShapeError(SeisBayesError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(SeisBayesError, ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(SeisBayesError, ValueError):
    """An API was called in a way its contract forbids."""


class NonFiniteError(SeisBayesError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ParseError(SeisBayesError, ValueError):
    """A data file could not be decoded."""


class TrainingError(SeisBayesError, RuntimeError):
    """Optimization failed (divergence, NaN objective)."""


class InvariantError(SeisBayesError, RuntimeError):
    """An internal invariant was violated."""


class UndefinedMetricError(SeisBayesError, ValueError):
    """A metric is undefined for the given input (e.g. constant truth)."""
