"""Uniform count-query interface over HTTP, simulator, and snapshot backends.

The wire protocol shared by every backend is a single JSON document per
request, ``{"spec": <predicates>, "interest": <id or null>}``, answered
by ``{"count": <int>, "clamped": <bool>}``.  Snapshots persist answers
as line-delimited JSON with a schema-version header; files are
append-only so interrupted fetches resume without rewriting history.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import requests

from .catalog import DemographicAxis, InterestCatalog, PopulationSpec, intersect_specs
from .errors import (
    AllZeroError,
    InvalidTargetingError,
    PlanTooLargeError,
    QuotaExceededError,
    SnapshotIncompleteError,
    TransportError,
)

SNAPSHOT_SCHEMA_VERSION = 1


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class ManualClock:
    """Injectable clock: sleeping advances time instantly.

    Keeps rate-limit tests free of wall-time waits and makes snapshot
    timestamps deterministic for seeded backends.
    """

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self.slept = 0.0

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._now += seconds
            self.slept += seconds

    def tick(self, seconds: float = 1.0) -> None:
        self._now += seconds


@dataclass(frozen=True, slots=True)
class AudienceQuery:
    """One count request: a population spec plus an optional interest.

    ``request_id`` hashes the spec predicates (label excluded) together
    with the interest, so two populations that share predicates share
    queries.
    """

    spec: PopulationSpec
    interest: Optional[str] = None

    @property
    def request_id(self) -> str:
        doc = canonical_json({"spec": self.spec.predicates(), "interest": self.interest})
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:32]

    def payload(self) -> dict:
        return {"spec": self.spec.predicates(), "interest": self.interest}


@dataclass(frozen=True, slots=True)
class AudienceCount:
    """One answered count query."""

    query: AudienceQuery
    count: int
    fetched_at: float
    backend: str
    clamped: bool = False

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be nonnegative")


class Backend(Protocol):
    name: str

    def count(self, query: AudienceQuery) -> tuple[int, bool]: ...


@dataclass(frozen=True, slots=True)
class RateLimitPolicy:
    max_requests_per_window: int = 100
    window_seconds: float = 60.0
    max_retries: int = 3
    backoff_seconds: tuple[float, ...] = (1.0, 5.0, 30.0)

    def __post_init__(self):
        if self.max_requests_per_window < 1 or self.window_seconds <= 0:
            raise ValueError("rate window must be positive")
        if self.max_retries < 1 or not self.backoff_seconds:
            raise ValueError("retry policy must be positive")
        if any(b <= 0 for b in self.backoff_seconds):
            raise ValueError("backoff durations must be positive")

    def backoff(self, attempt: int) -> float:
        return self.backoff_seconds[min(attempt, len(self.backoff_seconds) - 1)]


class RateLimiter:
    """Fixed-window limiter; when the window is spent, sleeps to its end."""

    def __init__(self, policy: RateLimitPolicy, clock: Clock):
        self.policy = policy
        self.clock = clock
        self._window_start = clock.now()
        self._used = 0

    def acquire(self) -> None:
        now = self.clock.now()
        if now >= self._window_start + self.policy.window_seconds:
            self._window_start = now
            self._used = 0
        if self._used >= self.policy.max_requests_per_window:
            self.clock.sleep(self._window_start + self.policy.window_seconds - now)
            self._window_start = self.clock.now()
            self._used = 0
        self._used += 1


class HttpBackend:
    """Client for a remote count endpoint speaking the shared protocol.

    Credentials are an opaque pass-through header; no auth flow is
    implemented here.
    """

    name = "http"

    def __init__(self, endpoint: str, auth_header: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._session = requests.Session()
        if auth_header:
            self._session.headers["Authorization"] = auth_header

    def count(self, query: AudienceQuery) -> tuple[int, bool]:
        try:
            resp = self._session.post(
                self.endpoint, json=query.payload(), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429:
            raise QuotaExceededError("backend quota exhausted")
        if resp.status_code == 400:
            detail = {}
            try:
                detail = resp.json().get("error", {})
            except ValueError:
                pass
            raise InvalidTargetingError(
                detail.get("predicate", "?"),
                detail.get("value"),
                detail.get("message"),
            )
        if resp.status_code != 200:
            raise TransportError(f"unexpected status {resp.status_code}")
        try:
            body = resp.json()
            return int(body["count"]), bool(body.get("clamped", False))
        except (ValueError, KeyError, TypeError) as exc:
            raise TransportError(f"malformed response body: {exc}") from exc


class SnapshotBackend:
    """Serves counts from a previously fetched snapshot file."""

    name = "snapshot"

    def __init__(self, snapshot: "Snapshot"):
        self.snapshot = snapshot
        self._by_id = {
            r.request_id: r for r in snapshot.records if r.status == "ok"
        }

    def count(self, query: AudienceQuery) -> tuple[int, bool]:
        record = self._by_id.get(query.request_id)
        if record is None:
            raise SnapshotIncompleteError(
                f"snapshot has no answer for request {query.request_id}"
            )
        return record.count, record.clamped


class ReachClient:
    """Caching, rate-limited, retrying front door to a backend.

    A repeated request id is answered from the cache without contacting
    the backend; the returned record is value-identical apart from the
    backend label, which reads "cache".
    """

    def __init__(
        self,
        backend: Backend,
        policy: RateLimitPolicy | None = None,
        clock: Clock | None = None,
    ):
        self.backend = backend
        self.clock = clock or SystemClock()
        self.policy = policy
        self._limiter = RateLimiter(policy, self.clock) if policy else None
        self._cache: dict[str, AudienceCount] = {}

    def estimate(self, query: AudienceQuery) -> AudienceCount:
        cached = self._cache.get(query.request_id)
        if cached is not None:
            return replace(cached, backend="cache")
        attempts = 0
        while True:
            if self._limiter is not None:
                self._limiter.acquire()
            try:
                count, clamped = self.backend.count(query)
                break
            except (TransportError, QuotaExceededError):
                attempts += 1
                if self.policy is None or attempts > self.policy.max_retries:
                    raise
                self.clock.sleep(self.policy.backoff(attempts - 1))
        result = AudienceCount(
            query=query,
            count=count,
            fetched_at=self.clock.now(),
            backend=self.backend.name,
            clamped=clamped,
        )
        self._cache[query.request_id] = result
        return result


def reach_estimate(
    backend: Backend,
    query: AudienceQuery,
    policy: RateLimitPolicy | None = None,
    clock: Clock | None = None,
) -> AudienceCount:
    """One-shot reach estimate without a shared cache."""
    return ReachClient(backend, policy=policy, clock=clock).estimate(query)


@dataclass(frozen=True, slots=True)
class QueryPlan:
    """Deduplicated, deterministically ordered sequence of queries."""

    queries: tuple[AudienceQuery, ...]

    def __post_init__(self):
        ids = [q.request_id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise ValueError("plan contains duplicate request ids")

    @property
    def estimated_request_count(self) -> int:
        return len(self.queries)


def _dedup(queries: Iterable[AudienceQuery]) -> tuple[AudienceQuery, ...]:
    seen: dict[str, AudienceQuery] = {}
    for q in queries:
        seen.setdefault(q.request_id, q)
    return tuple(seen.values())


def plan_queries(
    populations: Sequence[PopulationSpec],
    catalog: InterestCatalog,
    cross_sections: Sequence[DemographicAxis] | None = None,
    budget: int | None = None,
) -> QueryPlan:
    """Plan every (population x cross-section x interest) cell.

    Each cell gets one query per catalog interest plus one total
    (interest absent).  With cross-section axes, a cell is a population
    conjoined with one category from every axis.  Queries are
    deduplicated by request id so populations sharing predicates share
    work; the plan size is known before fetching.
    """
    if not populations:
        raise ValueError("populations must be non-empty")
    queries: list[AudienceQuery] = []
    for spec in populations:
        if cross_sections:
            combos = itertools.product(*(axis.categories for axis in cross_sections))
            cells = [
                spec.with_selectors(
                    {axis.name: cat for axis, cat in zip(cross_sections, combo)}
                )
                for combo in combos
            ]
        else:
            cells = [spec]
        for cell in cells:
            for interest_id in catalog.ids:
                queries.append(AudienceQuery(cell, interest_id))
            queries.append(AudienceQuery(cell, None))
    plan = QueryPlan(_dedup(queries))
    if budget is not None and plan.estimated_request_count > budget:
        raise PlanTooLargeError(
            f"plan needs {plan.estimated_request_count} requests; budget is {budget}"
        )
    return plan


def plan_marginals(
    populations: Sequence[PopulationSpec], axes: Sequence[DemographicAxis]
) -> QueryPlan:
    """Per-axis marginal totals used for demographic-proportion checks."""
    queries = [
        AudienceQuery(spec.with_selectors({axis.name: category}), None)
        for spec in populations
        for axis in axes
        for category in axis.categories
    ]
    return QueryPlan(_dedup(queries))


def merge_plans(*plans: QueryPlan) -> QueryPlan:
    return QueryPlan(_dedup(q for plan in plans for q in plan.queries))


@dataclass(frozen=True, slots=True)
class SnapshotRecord:
    request_id: str
    spec: Mapping
    interest: Optional[str]
    status: str  # ok | failed
    count: int = 0
    clamped: bool = False
    fetched_at: float = 0.0
    backend: str = ""
    error_type: Optional[str] = None
    error: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "spec", dict(self.spec))

    def to_json(self) -> str:
        doc = {
            "request_id": self.request_id,
            "spec": self.spec,
            "interest": self.interest,
            "status": self.status,
        }
        if self.status == "ok":
            doc.update(
                count=self.count,
                clamped=self.clamped,
                fetched_at=self.fetched_at,
                backend=self.backend,
            )
        else:
            doc.update(error_type=self.error_type, error=self.error)
        return canonical_json(doc)

    @classmethod
    def from_json(cls, line: str) -> "SnapshotRecord":
        doc = json.loads(line)
        return cls(
            request_id=doc["request_id"],
            spec=doc["spec"],
            interest=doc.get("interest"),
            status=doc["status"],
            count=int(doc.get("count", 0)),
            clamped=bool(doc.get("clamped", False)),
            fetched_at=float(doc.get("fetched_at", 0.0)),
            backend=doc.get("backend", ""),
            error_type=doc.get("error_type"),
            error=doc.get("error"),
        )

    @classmethod
    def from_count(cls, result: AudienceCount) -> "SnapshotRecord":
        return cls(
            request_id=result.query.request_id,
            spec=result.query.spec.predicates(),
            interest=result.query.interest,
            status="ok",
            count=result.count,
            clamped=result.clamped,
            fetched_at=result.fetched_at,
            backend=result.backend,
        )


@dataclass(frozen=True, slots=True)
class Snapshot:
    """Append-only collection of answered (or failed) count queries."""

    study_id: str
    backend: str
    records: tuple[SnapshotRecord, ...] = ()
    schema_version: int = SNAPSHOT_SCHEMA_VERSION

    def header_json(self) -> str:
        return canonical_json(
            {
                "kind": "assimlab-snapshot",
                "schema_version": self.schema_version,
                "study_id": self.study_id,
                "backend": self.backend,
            }
        )

    def request_ids(self) -> set[str]:
        return {r.request_id for r in self.records}

    def count_map(self) -> dict[str, tuple[int, bool]]:
        return {
            r.request_id: (r.count, r.clamped)
            for r in self.records
            if r.status == "ok"
        }

    def lookup(self, spec: PopulationSpec, interest: Optional[str]) -> int:
        query = AudienceQuery(spec, interest)
        record = next(
            (r for r in self.records if r.request_id == query.request_id), None
        )
        if record is None or record.status != "ok":
            raise SnapshotIncompleteError(
                f"no count for {spec.label!r} / {interest!r} in snapshot"
            )
        return record.count

    def write(self, path: str | Path) -> None:
        path = Path(path)
        lines = [self.header_json()] + [r.to_json() for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Snapshot":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"empty snapshot file {path}")
        header = json.loads(lines[0])
        if header.get("kind") != "assimlab-snapshot":
            raise ValueError(f"{path} is not a snapshot file")
        records = tuple(SnapshotRecord.from_json(line) for line in lines[1:] if line)
        return cls(
            study_id=header["study_id"],
            backend=header["backend"],
            records=records,
            schema_version=int(header["schema_version"]),
        )


def fetch_snapshot(
    backend: Backend,
    plan: QueryPlan,
    policy: RateLimitPolicy | None = None,
    clock: Clock | None = None,
    study_id: str = "study",
    path: str | Path | None = None,
    resume: bool = True,
) -> Snapshot:
    """Execute a plan, appending answers to a snapshot as they arrive.

    Already-answered request ids are skipped when resuming, so a rerun
    after an interruption converges on the same snapshot a clean run
    produces.  Invalid targeting and exhausted transport retries are
    recorded as failed rows; quota exhaustion beyond the retry budget
    aborts, keeping the completed portion on disk.
    """
    clock = clock or SystemClock()
    existing: list[SnapshotRecord] = []
    if path is not None and resume and Path(path).exists():
        existing = list(Snapshot.read(path).records)
    done = {r.request_id for r in existing}
    records = list(existing)
    client = ReachClient(backend, policy=policy, clock=clock)

    handle = None
    if path is not None:
        is_new = not Path(path).exists() or not resume
        handle = open(path, "w" if is_new else "a", encoding="utf-8")
        if is_new:
            head = Snapshot(study_id, backend.name).header_json()
            handle.write(head + "\n")
    try:
        for query in plan.queries:
            if query.request_id in done:
                continue
            try:
                result = client.estimate(query)
                record = SnapshotRecord.from_count(result)
            except InvalidTargetingError as exc:
                record = SnapshotRecord(
                    request_id=query.request_id,
                    spec=query.spec.predicates(),
                    interest=query.interest,
                    status="failed",
                    error_type="invalid-targeting",
                    error=str(exc),
                )
            except TransportError as exc:
                record = SnapshotRecord(
                    request_id=query.request_id,
                    spec=query.spec.predicates(),
                    interest=query.interest,
                    status="failed",
                    error_type="transport",
                    error=str(exc),
                )
            records.append(record)
            done.add(query.request_id)
            if handle is not None:
                handle.write(record.to_json() + "\n")
                handle.flush()
    finally:
        if handle is not None:
            handle.close()
    return Snapshot(study_id=study_id, backend=backend.name, records=tuple(records))


@dataclass(frozen=True, slots=True)
class OverlapResult:
    """Pairwise population overlap with its denominator convention.

    The fraction is count(a and b) / min(count(a), count(b)); the
    convention is recorded because published overlap percentages rarely
    state their base, and the min keeps nested populations in [0, 1].
    """

    fraction: float
    count_a: int
    count_b: int
    count_intersection: int
    convention: str = "intersection / min(count_a, count_b)"


def overlap_fraction(
    a: PopulationSpec,
    b: PopulationSpec,
    backend: Backend,
    clock: Clock | None = None,
) -> OverlapResult:
    client = ReachClient(backend, clock=clock)
    count_a = client.estimate(AudienceQuery(a, None)).count
    count_b = client.estimate(AudienceQuery(b, None)).count
    if count_a == 0 and count_b == 0:
        raise AllZeroError("both populations are empty")
    both = client.estimate(AudienceQuery(intersect_specs(a, b), None)).count
    denominator = min(count_a, count_b)
    return OverlapResult(
        fraction=both / denominator if denominator > 0 else 0.0,
        count_a=count_a,
        count_b=count_b,
        count_intersection=both,
    )
