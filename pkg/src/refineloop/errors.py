"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class RefineLoopError(Exception):
    """Base class for all engine errors."""


# agents
class BackendUnavailable(RefineLoopError):
    """A remote backend kept failing after its internal retries."""


class SchemaViolation(RefineLoopError):
    """An agent response could not be parsed against the declared schema."""


class MissingContextField(RefineLoopError, KeyError):
    pass


class PhaseViolation(RefineLoopError):
    """A role was queried in a phase that does not admit it."""


# embedding
class EmptyText(RefineLoopError, ValueError):
    pass


class DimensionMismatch(RefineLoopError, ValueError):
    pass


class ZeroVector(RefineLoopError, ValueError):
    pass


# corpus
class SourceUnavailable(RefineLoopError):
    pass


class RateLimited(SourceUnavailable):
    pass


class PoolEmpty(RefineLoopError):
    pass


# scoring / selection
class QuotaUnsatisfiable(RefineLoopError):
    pass


class InvalidReferenceSet(RefineLoopError, ValueError):
    pass


# ideation
class AllProposalsRejected(RefineLoopError):
    pass


class InvalidBlueprint(RefineLoopError, ValueError):
    pass


class ValidationExhausted(RefineLoopError):
    def __init__(self, message: str, blueprint=None):
        super().__init__(message)
        self.blueprint = blueprint


# execution
class ApplyFailure(RefineLoopError):
    pass


# memory
class NonContiguousIteration(RefineLoopError):
    pass


class DuplicateIteration(RefineLoopError):
    pass


class SnapshotMissing(RefineLoopError, KeyError):
    pass


class StoreCorruption(RefineLoopError):
    pass


# metrics / orchestrator
class EmptyTrajectory(RefineLoopError, ValueError):
    pass


class EmptyStore(RefineLoopError):
    pass


class InconsistentAblations(RefineLoopError, ValueError):
    pass
