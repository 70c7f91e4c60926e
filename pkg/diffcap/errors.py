"""Error taxonomy.

Every failure the CLI can report maps to one of these classes, and each class
maps to one process exit code:

- ``ConfigError``: 1 (usage error)
- ``DataError`` and its subclasses: 2 (data error)
- ``NumericalError``: 3 (numerical failure)

The data/config classes also subclass ``ValueError`` so that callers (and
tests) that only care about "invalid input" can keep catching ``ValueError``.
"""

from __future__ import annotations


class DiffcapError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = 1


class ConfigError(DiffcapError, ValueError):
    """Invalid configuration, override, or command-line usage."""

    exit_code = 1


class DataError(DiffcapError, ValueError):
    """Invalid, missing, or inconsistent data artifacts."""

    exit_code = 2


class ManifestError(DataError):
    """A dataset manifest failed to parse or validate.

    Parameters
    ----------
    message:
        Human-readable description.
    line_number:
        1-based line in the manifest file, when the failure is line-specific.
    """

    def __init__(self, message: str, *, line_number: int | None = None) -> None:
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class VocabularyError(DataError):
    """A vocabulary could not be built, read, or used."""


class CheckpointError(DataError):
    """A checkpoint is corrupt, from another format version, or incompatible.

    Parameters
    ----------
    message:
        Human-readable description.
    tensor_name:
        Name of the offending tensor, when the failure is tensor-specific.
    """

    def __init__(self, message: str, *, tensor_name: str | None = None) -> None:
        super().__init__(message)
        self.tensor_name = tensor_name


class NumericalError(DiffcapError, ArithmeticError):
    """Non-finite values or degenerate inputs in a numerical computation."""

    exit_code = 3


def exit_code_for(exc: BaseException) -> int:
    """Return the CLI exit code for an exception."""

    if isinstance(exc, DiffcapError):
        return exc.exit_code
    if isinstance(exc, FileNotFoundError):
        return DataError.exit_code
    return 1
