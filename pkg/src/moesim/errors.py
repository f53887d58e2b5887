"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input value violates a documented invariant; message names the field."""


class ParseError(ValueError):
    """A serialized artifact could not be parsed; message carries the line number."""


class TraceError(ValueError):
    """A trace lacks data an operation needs (missing layer, token, or route)."""


class ContractError(RuntimeError):
    """An internal precondition was violated by the caller."""


class TrainingError(RuntimeError):
    """Training diverged; message reports the failing step index."""


class PlanningError(ValueError):
    """Memory planning found no feasible configuration."""


class SimulationError(RuntimeError):
    """The simulated run hit an unrecoverable state (e.g. cache too small)."""
