"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and format problems exit
with 2, I/O problems with 3, training divergence with 4.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid, contradictory, or unknown configuration."""


class FormatError(ValueError):
    """A structured input file does not follow its documented format."""


class IngestionError(OSError):
    """An image or data file could not be read."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, domain id, ...)."""


class TransplantError(ConfigError):
    """Two checkpoints cannot be merged into one joint model."""

    def __init__(self, field: str, message: str):
        super().__init__(f"transplant mismatch on '{field}': {message}")
        self.field = field


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite; carries the offending component."""

    def __init__(self, component: str, message: str = ""):
        super().__init__(f"non-finite value in '{component}'" + (f": {message}" if message else ""))
        self.component = component


class DivergenceError(RuntimeError):
    """Training aborted; the last good checkpoint is retained on disk."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
