"""Exception types shared across the package."""


class HavtError(Exception):
    """Base class for package errors."""


class ValidationError(HavtError, ValueError):
    """A domain object violates one of its invariants."""


class ConfigError(HavtError, ValueError):
    """Invalid configuration (bad ratios, unknown keys, out-of-range values)."""


class ShapeError(HavtError, ValueError):
    """Tensor shape does not match the configured model."""


class TrainingAborted(HavtError, RuntimeError):
    """Training stopped on a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
