"""Exception hierarchy shared by all semilex modules."""


class SemilexError(Exception):
    """Base class for every error raised by this package."""


class InputError(SemilexError, ValueError):
    """Caller-supplied data violates a documented precondition."""


class ParameterError(SemilexError, ValueError):
    """A tuning parameter is outside its documented range."""


class FormatError(SemilexError, ValueError):
    """A binary file does not match its documented byte layout."""


class ConsistencyError(SemilexError, ValueError):
    """Two inputs that must agree (e.g. image/label files) do not."""


class SchemaError(SemilexError, ValueError):
    """A JSON document does not match the documented schema."""


class GeometryError(SemilexError, ValueError):
    """Image dimensions are incompatible with the declared grid."""


class ConfigurationError(SemilexError, ValueError):
    """A rule set or configuration is incomplete."""


class TrainingError(SemilexError, RuntimeError):
    """Optimisation diverged; the message names the offending epoch."""


class PreconditionError(SemilexError, ValueError):
    """An operation was invoked on a state it does not accept."""
