"""Exception hierarchy shared across the package."""


class TecaBenchError(Exception):
    """Base class for all package errors."""


class ConfigError(TecaBenchError):
    """Invalid configuration: bad schema, unknown key, or illegal value."""


class ValidationError(TecaBenchError):
    """Runtime input failed a documented precondition."""


class ContractError(TecaBenchError):
    """An API contract was violated by the caller (wrong state, wrong pairing)."""


class InputShapeError(ValidationError):
    """Tensor shape incompatible with the architecture."""


class NumericalError(TecaBenchError):
    """Non-finite value produced; message names the offending layer."""


class IngestionError(TecaBenchError):
    """Malformed external data file; message names the byte offset."""
