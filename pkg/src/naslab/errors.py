"""Exception types shared across the package."""


class NaslabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NaslabError):
    """A layer, network, or experiment was set up with inconsistent parameters."""


class DataError(NaslabError):
    """Input values are invalid at runtime (bad labels, non-finite activations)."""


class StateError(NaslabError):
    """An operation was invoked out of order (e.g. backward before forward)."""


class FormatError(NaslabError):
    """A binary dataset file does not match the expected layout."""


class AlignmentError(NaslabError):
    """Run histories that should share an epoch grid do not."""


class InsufficientDataError(NaslabError):
    """Not enough history to compute the requested statistic."""
