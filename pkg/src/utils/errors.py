"""Exception hierarchy and process exit codes.

Each error also derives from the closest builtin so callers that only
know ``ValueError``/``RuntimeError`` keep working.
"""
from __future__ import annotations

from enum import IntEnum


class ExitCode(IntEnum):
    OK = 0
    FAILURE = 1
    CONFIG = 2
    CAPACITY = 3
    ECC = 4
    VERIFY = 5
    CHECKPOINT = 6
    FILE = 7


class StegoError(Exception):
    """Base class for every error raised by the project."""

    exit_code: ExitCode = ExitCode.FAILURE


class ConfigurationError(StegoError, ValueError):
    exit_code = ExitCode.CONFIG


class MalformedImageError(StegoError, ValueError):
    exit_code = ExitCode.FILE


class IngestionError(StegoError, RuntimeError):
    """Raised when a dataset directory yields too few decodable images."""

    exit_code = ExitCode.FILE

    def __init__(self, message: str, failures: list[str] | None = None) -> None:
        self.failures = list(failures or [])
        if self.failures:
            message = f"{message}; failures: {', '.join(self.failures)}"
        super().__init__(message)


class PayloadSizeError(StegoError, ValueError):
    exit_code = ExitCode.CAPACITY


class CapacityError(PayloadSizeError):
    """Payload (after optional ECC) exceeds the (S/N)^2 bit capacity."""

    def __init__(self, needed_bits: int, capacity_bits: int) -> None:
        self.needed_bits = needed_bits
        self.capacity_bits = capacity_bits
        super().__init__(
            f"payload needs {needed_bits} bits but capacity is {capacity_bits} bits"
        )


class EccDecodeError(StegoError, ValueError):
    exit_code = ExitCode.ECC


class InputShapeError(StegoError, ValueError):
    exit_code = ExitCode.FILE


class IncompatibleCheckpointError(StegoError, ValueError):
    exit_code = ExitCode.CHECKPOINT


class MissingGroundTruthError(StegoError, FileNotFoundError):
    exit_code = ExitCode.FILE


class TrainingAbortedError(StegoError, RuntimeError):
    """Non-finite loss; ``snapshot`` carries the diagnostic state at the failing step."""

    def __init__(self, message: str, snapshot: dict | None = None) -> None:
        self.snapshot = dict(snapshot or {})
        super().__init__(message)


class VerificationError(StegoError, RuntimeError):
    exit_code = ExitCode.VERIFY


class DetectorDataError(StegoError, ValueError):
    exit_code = ExitCode.CONFIG


__all__ = [
    "ExitCode",
    "StegoError",
    "ConfigurationError",
    "MalformedImageError",
    "IngestionError",
    "PayloadSizeError",
    "CapacityError",
    "EccDecodeError",
    "InputShapeError",
    "IncompatibleCheckpointError",
    "MissingGroundTruthError",
    "TrainingAbortedError",
    "VerificationError",
    "DetectorDataError",
]
