"""Populations, demographic axes, and the musical-interest catalog.

Everything in this module is an immutable value object: catalogs and
population specs are built once and shared freely between the query
planner, the backends, and the metrics layer.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ContradictionError, EmptyResultError, MissingConfigError

#: Axis names the targeting layer understands.
KNOWN_AXES = ("gender", "age", "education", "language", "region")

#: Axes whose categories carry a natural order (still encoded as
#: categorical in regressions).
ORDINAL_AXES = ("age", "education")

DEFAULT_CATALOG_FLOOR = 100_000

#: Default category sets observed in US ad-audience studies.  Study
#: configs may override any of these.
DEFAULT_AXIS_CATEGORIES: dict[str, tuple[str, ...]] = {
    "gender": ("Female", "Male"),
    "age": ("13-18", "19-28", "29-38", "39-48", "49-65"),
    "education": (
        "College degree+",
        "High school graduate",
        "Less than high school graduate",
        "Two-year degree, Some college",
    ),
    "language": ("Bilingual", "English", "Spanish"),
    "region": ("Midwest", "Northeast", "South", "West"),
}

DEFAULT_REFERENCE_LEVELS: dict[str, str] = {
    "gender": "Female",
    "age": "13-18",
    "education": "College degree+",
    "language": "Bilingual",
    "region": "Midwest",
}


_SLUG_RE = re.compile(r"[^a-z0-9]+")


def slugify(name: str) -> str:
    """Lowercase, hyphen-separated, accent-folded identifier for a name."""
    folded = (
        unicodedata.normalize("NFKD", name).encode("ascii", "ignore").decode("ascii")
    )
    slug = _SLUG_RE.sub("-", folded.strip().lower()).strip("-")
    if not slug:
        raise ValueError(f"name {name!r} produces an empty id")
    return slug


@dataclass(frozen=True, slots=True)
class Interest:
    """One musical genre with its worldwide audience count."""

    id: str
    name: str
    worldwide_audience: int

    def __post_init__(self):
        if self.worldwide_audience < 0:
            raise ValueError(f"negative audience for {self.id!r}")


@dataclass(frozen=True, slots=True)
class InterestCatalog:
    """Ordered genre set with the worldwide-audience floor applied.

    Interests are sorted lexicographically by id so that downstream
    ratio vectors are index-aligned regardless of input order.
    """

    interests: tuple[Interest, ...]
    floor: int = DEFAULT_CATALOG_FLOOR
    dropped: int = 0

    def __post_init__(self):
        ids = [i.id for i in self.interests]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate interest ids in catalog")
        if ids != sorted(ids):
            raise ValueError("catalog interests must be sorted by id")
        for i in self.interests:
            if i.worldwide_audience < self.floor:
                raise ValueError(f"{i.id!r} is below the catalog floor")

    def __len__(self) -> int:
        return len(self.interests)

    def __contains__(self, interest_id: str) -> bool:
        return interest_id in self.index

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i.id for i in self.interests)

    @property
    def index(self) -> dict[str, int]:
        return {i.id: k for k, i in enumerate(self.interests)}


def build_catalog(
    raw: Iterable[tuple[str, int]], floor: int = DEFAULT_CATALOG_FLOOR
) -> InterestCatalog:
    """Build an interest catalog from raw (name, worldwide_audience) pairs.

    Entries below ``floor`` are dropped (small genres are unreliable for
    comparing sub-populations); duplicate names keep the largest
    audience.  The number of floor-dropped entries is recorded on the
    returned catalog.
    """
    if floor < 0:
        raise ValueError("floor must be >= 0")
    best: dict[str, Interest] = {}
    for name, audience in raw:
        interest = Interest(slugify(name), name, int(audience))
        prev = best.get(interest.id)
        if prev is None or interest.worldwide_audience > prev.worldwide_audience:
            best[interest.id] = interest
    if not best:
        raise EmptyResultError("no raw interests supplied")
    kept = [i for i in best.values() if i.worldwide_audience >= floor]
    if not kept:
        raise EmptyResultError(f"no interest survives the floor of {floor}")
    kept.sort(key=lambda i: i.id)
    return InterestCatalog(tuple(kept), floor=floor, dropped=len(best) - len(kept))


@dataclass(frozen=True, slots=True)
class DemographicAxis:
    """One targeting axis (gender, age, ...) with its category labels."""

    name: str
    categories: tuple[str, ...]
    ordinal: bool = False
    reference: Optional[str] = None

    def __post_init__(self):
        if self.name not in KNOWN_AXES:
            raise ValueError(f"unknown axis {self.name!r}; expected one of {KNOWN_AXES}")
        if not self.categories:
            raise ValueError(f"axis {self.name!r} has no categories")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError(f"axis {self.name!r} has duplicate categories")
        if self.reference is not None and self.reference not in self.categories:
            raise ValueError(
                f"reference {self.reference!r} is not a category of axis {self.name!r}"
            )


def default_axis(name: str) -> DemographicAxis:
    return DemographicAxis(
        name,
        DEFAULT_AXIS_CATEGORIES[name],
        ordinal=name in ORDINAL_AXES,
        reference=DEFAULT_REFERENCE_LEVELS[name],
    )


@dataclass(frozen=True, slots=True)
class PopulationSpec:
    """A conjunctive targeting predicate describing one population.

    ``expat_origin`` set means "born in that country, living outside
    it"; ``non_expat`` asserts the complement (lives in the home
    country and is not flagged as an expat).  The two are mutually
    exclusive.
    """

    label: str
    ethnic_affinity: Optional[str] = None
    home_country: Optional[str] = None
    expat_origin: Optional[str] = None
    non_expat: bool = False
    language: Optional[str] = None
    interests_required: frozenset[str] = frozenset()
    locations: frozenset[str] = frozenset()
    demographic_selectors: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.expat_origin is not None and self.non_expat:
            raise ContradictionError(
                f"{self.label!r}: expat_origin and non_expat are mutually exclusive"
            )
        object.__setattr__(self, "interests_required", frozenset(self.interests_required))
        object.__setattr__(self, "locations", frozenset(self.locations))
        object.__setattr__(self, "demographic_selectors", dict(self.demographic_selectors))

    def with_selectors(self, selectors: Mapping[str, str], label: str | None = None) -> "PopulationSpec":
        """A copy of this spec with extra demographic selectors conjoined."""
        merged = dict(self.demographic_selectors)
        for axis, category in selectors.items():
            if axis in merged and merged[axis] != category:
                raise ContradictionError(
                    f"axis {axis!r}: {merged[axis]!r} conflicts with {category!r}"
                )
            merged[axis] = category
        new_label = label or " ".join(
            [self.label] + [f"[{a}={c}]" for a, c in sorted(selectors.items())]
        )
        return replace(self, label=new_label, demographic_selectors=merged)

    def predicates(self) -> dict:
        """Canonical JSON-compatible predicate document (label excluded).

        This is the wire-format ``spec`` object shared by every
        backend, and the content hashed into query request ids.
        """
        return {
            "ethnic_affinity": self.ethnic_affinity,
            "home_country": self.home_country,
            "expat_origin": self.expat_origin,
            "non_expat": self.non_expat,
            "language": self.language,
            "interests_required": sorted(self.interests_required),
            "locations": sorted(self.locations),
            "demographic_selectors": dict(sorted(self.demographic_selectors.items())),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.predicates(), sort_keys=True, separators=(",", ":"))

    def same_predicates(self, other: "PopulationSpec") -> bool:
        return self.predicates() == other.predicates()

    @classmethod
    def from_predicates(cls, payload: Mapping, label: str = "") -> "PopulationSpec":
        return cls(
            label=label or "<wire>",
            ethnic_affinity=payload.get("ethnic_affinity"),
            home_country=payload.get("home_country"),
            expat_origin=payload.get("expat_origin"),
            non_expat=bool(payload.get("non_expat", False)),
            language=payload.get("language"),
            interests_required=frozenset(payload.get("interests_required") or ()),
            locations=frozenset(payload.get("locations") or ()),
            demographic_selectors=dict(payload.get("demographic_selectors") or {}),
        )


PROXY_KINDS = ("interest_in_origin", "speaks_origin_language", "origin_communities")


@dataclass(frozen=True, slots=True)
class GenerationProxy:
    """An observable stand-in for unobservable 2nd+ generation status."""

    kind: str
    parameters: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PROXY_KINDS:
            raise ValueError(f"unknown proxy kind {self.kind!r}")
        object.__setattr__(self, "parameters", dict(self.parameters))


@dataclass(frozen=True, slots=True)
class ProxySettings:
    """Study-level labels needed to turn a proxy into a targeting spec."""

    affinity: str
    destination_country: str
    origin_country: str
    origin_interest: str
    origin_language: str
    group_name: str
    community_locations: tuple[str, ...] = ()


def resolve_proxy(proxy: GenerationProxy, settings: ProxySettings) -> PopulationSpec:
    """Deterministically expand a generation proxy into a population spec.

    All three proxies share the base predicate "affinity-matched
    non-expats living in the destination country"; they differ in the
    marker that stands in for generational status (origin interest,
    origin language, or residence in origin-heavy communities).
    """
    base = dict(
        ethnic_affinity=settings.affinity,
        home_country=settings.destination_country,
        non_expat=True,
    )
    if proxy.kind == "interest_in_origin":
        return PopulationSpec(
            label=f"{settings.group_name} ({settings.origin_interest})",
            interests_required=frozenset({slugify(settings.origin_interest)}),
            **base,
        )
    if proxy.kind == "speaks_origin_language":
        return PopulationSpec(
            label=f"{settings.group_name} ({settings.origin_language})",
            language=settings.origin_language,
            **base,
        )
    # origin_communities
    cities = tuple(proxy.parameters.get("communities") or settings.community_locations)
    if not cities:
        raise MissingConfigError(
            "origin_communities proxy requires a community city list"
        )
    return PopulationSpec(
        label=f"{settings.group_name} (communities)",
        locations=frozenset(cities),
        **base,
    )


def _merge_scalar(name: str, a, b):
    if a is None:
        return b
    if b is None or a == b:
        return a
    raise ContradictionError(f"{name}: {a!r} conflicts with {b!r}")


def intersect_specs(a: PopulationSpec, b: PopulationSpec) -> PopulationSpec:
    """Conjunction of two population specs.

    Scalar predicates must agree where both are set; interest and
    location requirements combine.  Locations are alternatives within
    one spec, so the conjunction keeps their intersection.  Returns
    ``a`` unchanged when both specs already carry identical predicates.
    """
    if a.same_predicates(b):
        return a
    if a.non_expat and b.expat_origin is not None or b.non_expat and a.expat_origin is not None:
        raise ContradictionError("expat_origin conflicts with non_expat")
    if a.locations and b.locations:
        locations = a.locations & b.locations
        if not locations:
            raise ContradictionError("location sets are disjoint")
    else:
        locations = a.locations | b.locations
    selectors = dict(a.demographic_selectors)
    for axis, category in b.demographic_selectors.items():
        if axis in selectors and selectors[axis] != category:
            raise ContradictionError(
                f"axis {axis!r}: {selectors[axis]!r} conflicts with {category!r}"
            )
        selectors[axis] = category
    return PopulationSpec(
        label=f"{a.label} ∩ {b.label}",
        ethnic_affinity=_merge_scalar("ethnic_affinity", a.ethnic_affinity, b.ethnic_affinity),
        home_country=_merge_scalar("home_country", a.home_country, b.home_country),
        expat_origin=_merge_scalar("expat_origin", a.expat_origin, b.expat_origin),
        non_expat=a.non_expat or b.non_expat,
        language=_merge_scalar("language", a.language, b.language),
        interests_required=a.interests_required | b.interests_required,
        locations=locations,
        demographic_selectors=selectors,
    )
