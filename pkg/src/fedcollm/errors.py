"""Exception taxonomy shared by all fedcollm modules."""


class FedCoLLMError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FedCoLLMError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(FedCoLLMError, ValueError):
    """Non-finite or otherwise invalid numeric input."""


class InputError(FedCoLLMError, ValueError):
    """Caller-supplied data violates an operation's precondition."""


class ContractError(FedCoLLMError, RuntimeError):
    """Internal API contract violated (e.g. missing gradients)."""


class ConfigError(FedCoLLMError, ValueError):
    """Invalid configuration value; message names the offending field."""


class ProtocolError(FedCoLLMError, RuntimeError):
    """Federation or aggregation protocol violated (mismatch, missing share)."""
