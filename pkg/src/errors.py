"""Exception types shared by the atlas modules.

The CLI maps ConfigurationError / DataFormatError to exit code 2 and every
other AtlasError to exit code 1.
"""


class AtlasError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AtlasError, ValueError):
    """Bad shapes, indices, config keys or model kinds."""


class DataFormatError(ConfigurationError):
    """A CSV file that does not follow the header/cell contract."""


class InsufficientDataError(AtlasError, ValueError):
    pass


class MissingCovariateError(AtlasError, ValueError):
    pass


class DomainError(AtlasError, ValueError):
    """A value outside the mathematical domain of an operation (e.g. variance <= 0)."""


class ImputationError(AtlasError, ValueError):
    pass


class NumericalError(AtlasError, RuntimeError):
    """Non-finite loss or gradient during training."""
