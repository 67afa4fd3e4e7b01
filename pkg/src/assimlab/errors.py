"""Exception and warning types shared across the toolkit."""

from __future__ import annotations


class AssimlabError(Exception):
    """Base class for all toolkit errors."""


class EmptyResultError(AssimlabError):
    """An operation produced an empty set where a non-empty one is required."""


class MissingConfigError(AssimlabError):
    """A study-config field required by the requested operation is absent."""


class ContradictionError(AssimlabError):
    """Two population specs constrain the same predicate to different values."""


class AllZeroError(AssimlabError):
    """Every input count is zero, so no proportion is defined."""


class CategoryMismatchError(AssimlabError):
    """Two distributions do not share the same category set."""


class ZeroVarianceError(AssimlabError):
    """All values are identical; no density can be estimated."""


class InsufficientDataError(AssimlabError):
    """Too few observations for the requested statistical test."""


class InfeasibleScenarioError(AssimlabError):
    """A planted scenario would require an interest share above 1."""


class PlanTooLargeError(AssimlabError):
    """A query plan exceeds the configured request budget."""


class SnapshotIncompleteError(AssimlabError):
    """A snapshot is missing planned queries and --allow-partial is not set."""


class InvalidTargetingError(AssimlabError):
    """Non-retryable: a backend rejected a targeting predicate.

    Carries the offending predicate so callers can surface it.
    """

    def __init__(self, predicate: str, value: object, message: str | None = None):
        self.predicate = predicate
        self.value = value
        super().__init__(message or f"invalid targeting: {predicate}={value!r}")


class TransportError(AssimlabError):
    """Retryable transport-level failure (connection, 5xx, malformed body)."""


class QuotaExceededError(AssimlabError):
    """Backend request quota exhausted; retry only after backoff."""


class RankDeficientError(AssimlabError):
    """The design matrix has exactly collinear columns."""

    def __init__(self, columns: list[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient: {', '.join(self.columns)}")


class DegenerateCIWarning(UserWarning):
    """Bootstrap interval computed from very few values."""


class RankDeficiencyWarning(UserWarning):
    """A design column is constant across all rows."""
