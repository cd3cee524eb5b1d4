class InvalidInputError(ValueError):
    """Raised when an image, grid or label does not satisfy an operation's contract."""


class ConfigurationError(ValueError):
    """Raised for invalid configuration, manifests or training setups."""


class BackendError(RuntimeError):
    """A classification backend failed; ``diagnostic`` carries its raw output."""

    def __init__(self, message, diagnostic=""):
        super().__init__(message)
        self.diagnostic = diagnostic


class TrainingError(RuntimeError):
    """Training hit a non-finite value and was aborted."""
