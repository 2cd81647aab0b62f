"""Exception hierarchy shared across the package."""


class SpikeclError(Exception):
    """Base class for all package errors."""


class ContractViolation(SpikeclError, ValueError):
    """An operation was called with arguments violating its precondition."""


class ConfigurationError(SpikeclError, ValueError):
    """A configuration references unknown names or inconsistent values."""


class FormatError(SpikeclError, ValueError):
    """A serialized file or byte stream is malformed."""


class TransportError(SpikeclError, IOError):
    """A transfer to or from the chip failed integrity checks."""


class ProtocolError(SpikeclError, RuntimeError):
    """The chip interaction protocol was invoked out of order."""


class ConstraintViolation(SpikeclError, ValueError):
    """A network or config image exceeds the chip's hardware limits."""
