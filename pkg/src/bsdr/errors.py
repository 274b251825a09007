"""Exception hierarchy; the CLI maps :class:`BsdrError` to exit code 1."""


class BsdrError(Exception):
    """Base class for all domain errors raised by this package."""


class DomainError(BsdrError, ValueError):
    """Input outside the domain of an operation (bad state, dims, agents)."""


class SchemaError(DomainError):
    """A serialized record does not match its schema or its GridSpec."""

    def __init__(self, message, line=None, step=None):
        self.line = line
        self.step = step
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class OracleSizeError(BsdrError):
    """Brute-force enumeration would exceed the configured cap."""


class BudgetExceededError(BsdrError):
    """A grid evaluation exceeds the configured point budget."""


class StaleBackupError(BsdrError):
    """A SoftBackup was used with parameters it was not computed for."""


class UnsupportedConfigurationError(BsdrError):
    """Requested combination of options is not supported."""


class DivergedError(BsdrError):
    """Optimizer produced a non-finite objective."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class DegenerateSolutionError(BsdrError):
    """Constrained heuristic converged to the degenerate zero direction."""
