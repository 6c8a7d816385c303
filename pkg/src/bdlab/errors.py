"""Exception types raised across the package."""


class BdlabError(Exception):
    """Base class for all package errors."""


class ConfigError(BdlabError, ValueError):
    """A configuration field is missing or outside its valid range."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DomainError(BdlabError, ValueError):
    """An input violates an operation's precondition."""


class StateError(BdlabError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward with no forward)."""


class DegenerateInputError(DomainError):
    """Inputs are valid in type but make the quantity undefined (zero norm, zero variance)."""


class GenerationExhaustedError(BdlabError, RuntimeError):
    """The data generator could not meet its filter within the retry budget."""


class NonFiniteError(BdlabError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""
