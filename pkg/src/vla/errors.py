"""Exception hierarchy shared across the package."""

from __future__ import annotations


class VlaError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(VlaError):
    """An input value violates a documented invariant."""


class EmptyInputError(ValidationError):
    """An operation that requires at least one element received none."""


class ParseError(VlaError):
    """A file could not be parsed. Carries the byte offset when known."""

    def __init__(self, message: str, *, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class ReferentialIntegrityError(ParseError):
    """A record references an id that does not exist in the same file."""


class ProtocolError(VlaError):
    """An agent response does not follow the wire contract.

    ``raw_response`` carries the offending payload so callers can decide
    whether to fall back to a more lenient parser.
    """

    def __init__(self, message: str, *, raw_response: object = None):
        super().__init__(message)
        self.raw_response = raw_response


class AgentUnavailableError(VlaError):
    """An agent endpoint could not be reached after all retries."""


class CredentialError(VlaError):
    """Authentication with an agent endpoint failed; retrying is pointless."""


class OracleUnavailableError(VlaError):
    """A ground-truth oracle was asked about a scene it has no truth for."""


class InfeasibleSpecError(VlaError):
    """A synthetic-scene spec could not be satisfied within the attempt budget."""


class ConfigMismatchError(VlaError):
    """A resume was attempted against a journal written with a different config."""

    def __init__(self, changed_fields: dict[str, tuple[object, object]]):
        self.changed_fields = changed_fields
        diff = ", ".join(
            f"{name}: {old!r} -> {new!r}" for name, (old, new) in sorted(changed_fields.items())
        )
        super().__init__(f"run config does not match journal ({diff})")
