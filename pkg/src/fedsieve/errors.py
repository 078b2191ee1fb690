"""Exception types shared across the simulator.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat
and specific.
"""


class FedsieveError(Exception):
    """Base class for all simulator errors."""


class RejectedInputError(FedsieveError, ValueError):
    """An operation received arguments that violate its contract."""


class IdxParseError(FedsieveError, ValueError):
    """An IDX file could not be parsed; the message names the bad field."""


class CapacityError(FedsieveError, ValueError):
    """Not enough samples to satisfy a partitioning request."""


class AggregationImpossibleError(FedsieveError):
    """Every client was excluded, leaving nothing to aggregate."""


class NumericFailureError(FedsieveError):
    """Non-finite values appeared in the global model."""


class ConfigError(FedsieveError, ValueError):
    """A configuration file, key, or value is invalid."""
