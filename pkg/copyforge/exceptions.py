"""Custom exception classes for the copyforge engine."""

from typing import Any, Dict, Optional, Sequence


class CopyForgeError(Exception):
    """Base exception for copyforge operations."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class DimensionError(CopyForgeError):
    """Operand shapes do not agree."""

    def __init__(
        self,
        message: str = "Shape mismatch",
        op: Optional[str] = None,
        shapes: Optional[Sequence[Sequence[int]]] = None,
    ):
        details: Dict[str, Any] = {}
        if op:
            details["op"] = op
        if shapes is not None:
            details["shapes"] = [list(s) for s in shapes]
        super().__init__(message, details)


class NumericError(CopyForgeError):
    """A forward value became NaN/Inf, or a log argument was invalid."""

    def __init__(self, message: str = "Non-finite value", op: Optional[str] = None):
        details = {"op": op} if op else {}
        super().__init__(message, details)


class EmptyDistributionError(CopyForgeError):
    """Softmax requested over a fully masked input."""

    def __init__(self, message: str = "All positions are masked"):
        super().__init__(message, {})


class SlotIndexError(CopyForgeError, IndexError):
    """Index outside the valid slot range."""

    def __init__(
        self,
        message: str = "Index out of range",
        index: Optional[int] = None,
        size: Optional[int] = None,
    ):
        details: Dict[str, Any] = {}
        if index is not None:
            details["index"] = index
        if size is not None:
            details["size"] = size
        super().__init__(message, details)


class ContractError(CopyForgeError):
    """A precondition of an operation was violated."""

    def __init__(self, message: str = "Contract violated", reason: Optional[str] = None):
        details = {"reason": reason} if reason else {}
        super().__init__(message, details)


class CorpusParseError(CopyForgeError):
    """A corpus line could not be parsed."""

    def __init__(
        self,
        message: str = "Malformed corpus line",
        path: Optional[str] = None,
        line_number: Optional[int] = None,
    ):
        details: Dict[str, Any] = {}
        if path:
            details["path"] = path
        if line_number is not None:
            details["line_number"] = line_number
        super().__init__(message, details)
        self.line_number = line_number


class CheckpointFormatError(CopyForgeError):
    """Checkpoint file is corrupt or incompatible."""

    def __init__(
        self,
        message: str = "Invalid checkpoint file",
        path: Optional[str] = None,
        reason: Optional[str] = None,
    ):
        details: Dict[str, Any] = {}
        if path:
            details["path"] = path
        if reason:
            details["reason"] = reason
        super().__init__(message, details)


class ConfigError(CopyForgeError):
    """Configuration key unknown or value invalid."""

    def __init__(self, message: str = "Invalid configuration", key: Optional[str] = None):
        details = {"key": key} if key else {}
        super().__init__(message, details)


class ModelUnavailableError(CopyForgeError):
    """The generation service has no trained model loaded."""

    def __init__(self, message: str = "No model loaded", checkpoint_dir: Optional[str] = None):
        details = {"checkpoint_dir": checkpoint_dir} if checkpoint_dir else {}
        super().__init__(message, details)


class NonFiniteLossError(CopyForgeError):
    """Training produced a NaN/Inf loss."""

    def __init__(
        self,
        message: str = "Non-finite training loss",
        batch_id: Optional[int] = None,
        components: Optional[Dict[str, float]] = None,
    ):
        details: Dict[str, Any] = {"batch_id": batch_id}
        if components:
            details["components"] = components
        super().__init__(message, details)
