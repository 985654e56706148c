"""Exception hierarchy shared across the simulator."""


class FedC2AError(Exception):
    """Base class for all simulator errors."""


class DimensionError(FedC2AError, ValueError):
    pass


class DegenerateInputError(FedC2AError, ValueError):
    pass


class ContractError(FedC2AError, RuntimeError):
    pass


class PoisonedGradientError(FedC2AError, FloatingPointError):
    """Raised when a gradient contains NaN; aborts the local epoch."""


class ConfigurationError(FedC2AError, ValueError):
    pass


class DataError(FedC2AError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SpecError(DataError):
    pass


class PartitionError(FedC2AError, ValueError):
    pass


class AggregationError(FedC2AError, ValueError):
    pass


class RoundError(FedC2AError, RuntimeError):
    pass


class UndefinedSimilarityError(FedC2AError, ValueError):
    pass


class ValidationError(ConfigurationError):
    """Invalid or missing config field; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
