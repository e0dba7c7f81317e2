"""Error types shared across the toolkit.

Every error carries a short machine-readable ``code`` next to the human
message so the CLI can report failures in a structured way. Validation
errors map to exit code 2, computation errors to exit code 3.
"""

from __future__ import annotations


class DrivekitError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    exit_code = 1

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class ValidationError(DrivekitError):
    """Malformed input: bad shapes, bad files, broken invariants."""

    exit_code = 2


class ComputationError(DrivekitError):
    """Well-formed input that is mathematically degenerate or unusable."""

    exit_code = 3
