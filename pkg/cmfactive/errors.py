"""Exception hierarchy. Each error carries the CLI exit code it maps to."""
from typing import Any, Dict, Optional


class CMFError(Exception):
    """Base class for all cmfactive errors."""
    exit_code = 1


class ConfigError(CMFError):
    """Invalid or unknown configuration."""
    exit_code = 2


class DataError(CMFError, ValueError):
    """Malformed input data or an operation called outside its domain."""
    exit_code = 3


class NumericalError(CMFError, ArithmeticError):
    """A numerical routine failed (non-convergence, singular update)."""
    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({details})"
