"""Shared exception types.

Every failure the toolkit raises deliberately derives from EditkitError so
the CLI can separate categorized errors (exit 1 with a short message) from
genuine bugs.
"""


class EditkitError(Exception):
    """Base class for all editkit errors."""


class ShapeMismatch(EditkitError, ValueError):
    """Tensor or image shapes violate an operation's contract."""


class NonFiniteValues(EditkitError, FloatingPointError):
    """NaN or Inf appeared where only finite values are allowed."""


class DegenerateInput(EditkitError, ValueError):
    """Input is structurally valid but has no defined result (e.g. a zero
    difference vector fed to a directional metric)."""


class ConfigError(EditkitError, ValueError):
    """Invalid or unknown configuration keys/values."""
