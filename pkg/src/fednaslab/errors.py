"""Exception types shared across the package."""


class FedNasError(Exception):
    """Base class for package errors."""


class ConfigError(FedNasError):
    """Bad configuration: unknown keys, out-of-range values, missing inputs."""


class ShapeMismatchError(FedNasError):
    """A layer received an input whose shape it cannot consume."""


class NonFiniteError(FedNasError):
    """A forward pass, loss, or update produced NaN or infinity."""


class BudgetExhaustedError(FedNasError):
    """A client cannot take another local-training pass without exceeding its budget."""


class InfeasibleError(FedNasError):
    """No admissible solution exists (search space, constraint set, or bound denominator)."""


class ParseError(FedNasError):
    """Malformed serialized input (dataset file, wire batch, genome string)."""
