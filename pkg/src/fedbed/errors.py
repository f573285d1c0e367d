"""Exception hierarchy shared by every fedbed component.

Each error carries a stable ``code`` string that survives the wire (error
frames and refusal reasons carry codes, not Python types), so clients can
re-raise the right class on their side of a connection.
"""

from __future__ import annotations


class FedbedError(Exception):
    """Base class; ``code`` is the wire-stable identifier."""

    code = "FedbedError"
    exit_code = 1

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# --- protocol ---------------------------------------------------------------

class MalformedMessage(FedbedError):
    code = "MalformedMessage"


class UnsupportedVersion(FedbedError):
    code = "UnsupportedVersion"


class KindMismatch(FedbedError):
    code = "KindMismatch"


class HashMismatch(FedbedError):
    """Plan bytes do not hash to the claimed plan hash (substitution signal)."""

    code = "HashMismatch"
    exit_code = 5


# --- broker -----------------------------------------------------------------

class BrokerUnavailable(FedbedError):
    code = "BrokerUnavailable"
    exit_code = 4


class BrokerUnreachable(BrokerUnavailable):
    code = "BrokerUnreachable"


class EmptyBlob(FedbedError):
    code = "EmptyBlob"


class BlobNotFound(FedbedError):
    code = "BlobNotFound"


class BlobIntegrityError(FedbedError):
    """Stored bytes no longer hash to their blob id."""

    code = "BlobIntegrityError"


class StoreFull(FedbedError):
    code = "StoreFull"


class InvalidTopic(FedbedError):
    code = "InvalidTopic"


# --- ml-core ----------------------------------------------------------------

class ShapeMismatch(FedbedError):
    code = "ShapeMismatch"


class IncompatibleLoss(FedbedError):
    code = "IncompatibleLoss"


class LayoutMismatch(FedbedError):
    code = "LayoutMismatch"


class DomainError(FedbedError):
    code = "DomainError"


class DatasetTooSmall(FedbedError):
    code = "DatasetTooSmall"


class MalformedBlob(FedbedError):
    code = "MalformedBlob"


# --- node -------------------------------------------------------------------

class PathNotFound(FedbedError):
    code = "PathNotFound"


class ParseError(FedbedError):
    code = "ParseError"


class DuplicateId(FedbedError):
    code = "DuplicateId"


class UnknownDataset(FedbedError):
    code = "UnknownDataset"


class UnknownColumn(FedbedError):
    code = "UnknownColumn"


class UnmappedValue(FedbedError):
    code = "UnmappedValue"


class UnknownPlan(FedbedError):
    code = "UnknownPlan"
    exit_code = 5


class AlreadyDecided(FedbedError):
    code = "AlreadyDecided"
    exit_code = 5


class PlanNotApproved(FedbedError):
    code = "PlanNotApproved"
    exit_code = 5


class NoMatchingDataset(FedbedError):
    code = "NoMatchingDataset"


class PolicyRefusal(FedbedError):
    code = "PolicyRefusal"
    exit_code = 5


class TrainingFailure(FedbedError):
    code = "TrainingFailure"


class TaskStopped(FedbedError):
    code = "TaskStopped"


# --- researcher -------------------------------------------------------------

class NoNodesResponded(FedbedError):
    code = "NoNodesResponded"
    exit_code = 4


class EmptyUpdateSet(FedbedError):
    code = "EmptyUpdateSet"


class RoundShortfall(FedbedError):
    code = "RoundShortfall"


class RoundInFlight(FedbedError):
    code = "RoundInFlight"


class BlobTransferError(FedbedError):
    code = "BlobTransferError"
    exit_code = 4


class FileError(FedbedError):
    code = "FileError"


class MalformedCheckpoint(FedbedError):
    code = "MalformedCheckpoint"


class VersionMismatch(FedbedError):
    code = "VersionMismatch"


class NoCompletedRounds(FedbedError):
    code = "NoCompletedRounds"


class ConfigError(FedbedError):
    code = "ConfigError"
    exit_code = 3


# --- secagg -----------------------------------------------------------------

class SecaggError(FedbedError):
    code = "SecaggError"


class TooFewNodes(SecaggError):
    code = "TooFewNodes"


class MessageTooLarge(SecaggError):
    code = "MessageTooLarge"


class TagMismatch(SecaggError):
    code = "TagMismatch"


class TagReused(SecaggError):
    code = "TagReused"


class CohortIncomplete(SecaggError):
    code = "CohortIncomplete"


class SecaggDecryptionError(SecaggError):
    code = "SecaggDecryptionError"


_BY_CODE = {}


def _register(cls):
    _BY_CODE[cls.code] = cls
    for sub in cls.__subclasses__():
        _register(sub)


_register(FedbedError)


def error_for_code(code: str, message: str = "") -> FedbedError:
    """Rebuild the exception class matching a wire error code."""
    cls = _BY_CODE.get(code, FedbedError)
    return cls(message)
