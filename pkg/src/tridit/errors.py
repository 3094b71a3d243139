"""Exception types shared across the package."""


class TriDiTError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TriDiTError):
    """Incompatible dimensions, ranks, or model settings."""


class InvalidInputError(TriDiTError):
    """Rejected input (bad shapes, empty sequences, unknown ids)."""


class SlotOccupiedError(TriDiTError):
    """An adapter slot of the requested kind is already occupied."""


class KindMismatchError(TriDiTError):
    """An adapter of the wrong kind was passed to an operation."""


class BankLoadError(TriDiTError):
    """A style bank entry failed validation; the message names the entry."""


class ManifestError(TriDiTError):
    """A dataset manifest failed validation; the message lists offenders."""


class JudgeProtocolError(TriDiTError):
    """A judge request/response violated the protocol schema."""
