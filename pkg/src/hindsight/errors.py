"""Exception hierarchy shared by every hindsight module."""

from __future__ import annotations


class HindsightError(Exception):
    """Base class for all errors raised by this package."""


# -- value store --------------------------------------------------------------


class StoreError(HindsightError):
    pass


class StoreIOError(StoreError):
    pass


class CorruptManifestError(StoreError):
    pass


class CorruptEntryError(StoreError):
    pass


class RunAlreadySealedError(StoreError):
    pass


class RunNotSealedError(StoreError):
    pass


class RunNotFoundError(StoreError):
    pass


class DuplicateEntryError(StoreError):
    pass


class EntryNotFoundError(StoreError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


# -- runtime ------------------------------------------------------------------


class NestingViolationError(HindsightError):
    pass


class MissingCheckpointError(HindsightError):
    pass


class SlotMismatchError(HindsightError):
    pass


# -- background materializer --------------------------------------------------


class QueueClosedError(HindsightError):
    pass


class MaterializationError(HindsightError):
    def __init__(self, message: str, failures=()):
        super().__init__(message)
        self.failures = list(failures)


class UnsealedRunError(MaterializationError):
    pass


# -- TrainScript --------------------------------------------------------------


class TrainScriptSyntaxError(HindsightError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.msg = message
        self.line = line
        self.col = col


class ScriptRuntimeError(HindsightError):
    pass


class UnknownBuiltinError(ScriptRuntimeError):
    pass


# -- replay -------------------------------------------------------------------


class ReplayPlanError(HindsightError):
    pass


class UnknownProbeError(ReplayPlanError):
    pass


class NoLoopsError(ReplayPlanError):
    pass


class MalformedLogError(HindsightError):
    pass


class OverlappingRangesError(HindsightError):
    pass


class CoverageError(HindsightError):
    pass
