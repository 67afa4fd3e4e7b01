"""Synthetic populations with planted interest distributions.

Worlds are generated from a scenario so that the true assimilation
ratios are known in closed form; serving answers the same wire protocol
as a live backend, which makes the simulator the pipeline's end-to-end
oracle.  Interest declaration uses deterministic quota assignment (the
first round(size * prob) persons of a seeded shuffle declare the
interest) so small-world counts are exact; a stochastic mode exists for
robustness tests.
"""

from __future__ import annotations

import http.server
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from .audience import AudienceCount, AudienceQuery, Clock, SystemClock
from .catalog import InterestCatalog, PopulationSpec
from .errors import (
    AllZeroError,
    EmptyResultError,
    InfeasibleScenarioError,
    InvalidTargetingError,
    MissingConfigError,
)

_TRAIT_FIELDS = ("ethnic_affinity", "home_country", "expat_origin", "language", "location")


def round_significant(value: int, digits: int) -> int:
    """Round a nonnegative integer to the given number of significant digits."""
    if value == 0:
        return 0
    magnitude = 10 ** (math.floor(math.log10(value)) - digits + 1)
    if magnitude <= 1:
        return int(value)
    return int(round(value / magnitude) * magnitude)


@dataclass(frozen=True, slots=True)
class Subgroup:
    """A block of identical-trait persons with per-interest declaration
    probabilities."""

    label: str
    size: int
    ethnic_affinity: Optional[str] = None
    home_country: Optional[str] = None
    expat_origin: Optional[str] = None
    language: Optional[str] = None
    location: Optional[str] = None
    demographics: Mapping[str, str] = field(default_factory=dict)
    interest_probs: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"subgroup {self.label!r} must have positive size")
        object.__setattr__(self, "demographics", dict(self.demographics))
        object.__setattr__(self, "interest_probs", dict(self.interest_probs))
        for interest, p in self.interest_probs.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(
                    f"probability {p} for {interest!r} in {self.label!r} outside [0, 1]"
                )

    def matches(self, spec: PopulationSpec) -> bool:
        for name in ("ethnic_affinity", "home_country", "expat_origin", "language"):
            wanted = getattr(spec, name)
            if wanted is not None and getattr(self, name) != wanted:
                return False
        if spec.non_expat and self.expat_origin is not None:
            return False
        if spec.locations and self.location not in spec.locations:
            return False
        for axis, category in spec.demographic_selectors.items():
            if self.demographics.get(axis) != category:
                return False
        return True


@dataclass(frozen=True, slots=True)
class SyntheticWorld:
    """Seeded universe of subgroups serving exact marginal counts."""

    seed: int
    subgroups: tuple[Subgroup, ...]
    rounding: Optional[int] = None
    floor: Optional[int] = None
    stochastic: bool = False
    planted: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    _masks: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "planted", {k: dict(v) for k, v in self.planted.items()}
        )

    @property
    def total_population(self) -> int:
        return sum(g.size for g in self.subgroups)

    @property
    def interests(self) -> tuple[str, ...]:
        return tuple(sorted({i for g in self.subgroups for i in g.interest_probs}))

    def _vocab(self, name: str) -> set:
        return {
            getattr(g, name) for g in self.subgroups if getattr(g, name) is not None
        }

    def _axis_vocab(self) -> dict[str, set[str]]:
        vocab: dict[str, set[str]] = {}
        for g in self.subgroups:
            for axis, category in g.demographics.items():
                vocab.setdefault(axis, set()).add(category)
        return vocab

    def _validate(self, spec: PopulationSpec, interest: Optional[str]) -> None:
        for name in _TRAIT_FIELDS[:-1]:
            wanted = getattr(spec, name)
            if wanted is not None and wanted not in self._vocab(name):
                raise InvalidTargetingError(name, wanted)
        known_locations = self._vocab("location")
        for loc in spec.locations:
            if loc not in known_locations:
                raise InvalidTargetingError("location", loc)
        axis_vocab = self._axis_vocab()
        for axis, category in spec.demographic_selectors.items():
            if axis not in axis_vocab:
                raise InvalidTargetingError("axis", axis)
            if category not in axis_vocab[axis]:
                raise InvalidTargetingError(axis, category)
        known_interests = set(self.interests)
        for i in spec.interests_required:
            if i not in known_interests:
                raise InvalidTargetingError("interest", i)
        if interest is not None and interest not in known_interests:
            raise InvalidTargetingError("interest", interest)

    def declared_mask(self, group_index: int, interest: str) -> np.ndarray:
        """Boolean membership mask for one (subgroup, interest) pair.

        In quota mode the first round(size * prob) persons of a seeded
        shuffle declare the interest; in stochastic mode each person
        flips an independent coin.
        """
        key = (group_index, interest)
        mask = self._masks.get(key)
        if mask is None:
            group = self.subgroups[group_index]
            prob = group.interest_probs.get(interest, 0.0)
            interest_index = self.interests.index(interest)
            rng = np.random.default_rng([self.seed, group_index, interest_index])
            if self.stochastic:
                mask = rng.random(group.size) < prob
            else:
                quota = int(np.rint(group.size * prob))
                mask = np.zeros(group.size, dtype=bool)
                mask[rng.permutation(group.size)[:quota]] = True
            mask.setflags(write=False)
            self._masks[key] = mask
        return mask

    def _group_count(self, group_index: int, interests: frozenset[str]) -> int:
        group = self.subgroups[group_index]
        if not interests:
            return group.size
        if len(interests) == 1 and not self.stochastic:
            (interest,) = interests
            return int(np.rint(group.size * group.interest_probs.get(interest, 0.0)))
        mask = np.ones(group.size, dtype=bool)
        for interest in interests:
            mask &= self.declared_mask(group_index, interest)
        return int(mask.sum())

    def raw_count(self, spec: PopulationSpec, interest: Optional[str] = None) -> int:
        """Exact person count before the floor and rounding are applied."""
        self._validate(spec, interest)
        needed = frozenset(spec.interests_required)
        if interest is not None:
            needed |= {interest}
        return sum(
            self._group_count(idx, needed)
            for idx, g in enumerate(self.subgroups)
            if g.matches(spec)
        )

    def count_query(self, spec: PopulationSpec, interest: Optional[str] = None) -> tuple[int, bool]:
        """Raw count with the world's floor and significant-digit rounding."""
        count = self.raw_count(spec, interest)
        clamped = False
        if self.floor is not None and count < self.floor:
            count = self.floor
            clamped = True
        if self.rounding is not None:
            count = round_significant(count, self.rounding)
        return count, clamped

    def expected_counts(self, spec: PopulationSpec, interests: Sequence[str]) -> np.ndarray:
        """Exact per-interest expected counts, size * prob per subgroup.

        Only valid for specs without required interests: the joint
        distribution of two quota-assigned interests is realized by
        sampling and has no closed form.
        """
        if spec.interests_required:
            raise ValueError(
                "expected_counts is undefined for specs with required interests"
            )
        self._validate(spec, None)
        totals = np.zeros(len(interests))
        for g in self.subgroups:
            if g.matches(spec):
                totals += np.array(
                    [g.size * g.interest_probs.get(i, 0.0) for i in interests]
                )
        return totals


def serve_count(
    world: SyntheticWorld, query: AudienceQuery, clock: Clock | None = None
) -> AudienceCount:
    clock = clock or SystemClock()
    count, clamped = world.count_query(query.spec, query.interest)
    return AudienceCount(
        query=query,
        count=count,
        fetched_at=clock.now(),
        backend="sim",
        clamped=clamped,
    )


class SimBackend:
    """In-process backend adapter over a synthetic world."""

    name = "sim"

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def count(self, query: AudienceQuery) -> tuple[int, bool]:
        return self.world.count_query(query.spec, query.interest)


# --- planted scenarios -------------------------------------------------


@dataclass(frozen=True, slots=True)
class BlocDef:
    """One population family in a scenario.

    Either ``shares`` (normalized interest shares) or ``ar_targets``
    (per-interest assimilation levels against the destination) defines
    the bloc's interest distribution.
    """

    label: str
    size: int
    traits: Mapping[str, object] = field(default_factory=dict)
    shares: Mapping[str, float] = field(default_factory=dict)
    ar_targets: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "traits", dict(self.traits))
        object.__setattr__(self, "shares", dict(self.shares))
        object.__setattr__(self, "ar_targets", dict(self.ar_targets))
        for interest, value in self.ar_targets.items():
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"AR target for {interest!r} must be positive and finite")


@dataclass(frozen=True, slots=True)
class PlantedScenario:
    """Destination, source, and expat blocs with planted AR levels."""

    interests: tuple[str, ...]
    dest: BlocDef
    source: BlocDef
    expats: tuple[BlocDef, ...]
    extra_subgroups: tuple[Subgroup, ...] = ()
    rounding: Optional[int] = None
    floor: Optional[int] = None

    def __post_init__(self):
        if len(set(self.interests)) != len(self.interests):
            raise ValueError("duplicate interests in scenario")
        if not self.expats:
            raise ValueError("scenario needs at least one expat bloc")


def _share_vector(name: str, shares: Mapping[str, float], interests: Sequence[str]) -> np.ndarray:
    unknown = set(shares) - set(interests)
    if unknown:
        raise ValueError(f"{name} shares reference unknown interests: {sorted(unknown)}")
    vec = np.array([float(shares.get(i, 0.0)) for i in interests])
    if (vec < 0).any():
        raise ValueError(f"{name} shares must be nonnegative")
    if abs(vec.sum() - 1.0) > 1e-9:
        raise InfeasibleScenarioError(f"{name} shares sum to {vec.sum()}, not 1")
    return vec


def _derive_expat_shares(
    bloc: BlocDef, dest_shares: np.ndarray, interests: Sequence[str]
) -> np.ndarray:
    """Expat shares realizing the bloc's AR targets against the destination."""
    index = {i: k for k, i in enumerate(interests)}
    unknown = set(bloc.ar_targets) - set(interests)
    if unknown:
        raise ValueError(f"AR targets reference unknown interests: {sorted(unknown)}")
    shares = np.zeros(len(interests))
    targeted = np.zeros(len(interests), dtype=bool)
    for interest, target in bloc.ar_targets.items():
        k = index[interest]
        shares[k] = target * dest_shares[k]
        targeted[k] = True
    planted_mass = shares[targeted].sum()
    if planted_mass > 1.0 + 1e-9:
        raise InfeasibleScenarioError(
            f"bloc {bloc.label!r}: planted shares require total mass {planted_mass:.6g} > 1"
        )
    if (shares > 1.0 + 1e-9).any():
        worst = interests[int(np.argmax(shares))]
        raise InfeasibleScenarioError(
            f"bloc {bloc.label!r}: interest {worst!r} would need share {shares.max():.6g} > 1"
        )
    remainder = 1.0 - planted_mass
    free = ~targeted
    if remainder > 1e-9:
        if not free.any():
            raise InfeasibleScenarioError(
                f"bloc {bloc.label!r}: all interests planted but shares sum to {planted_mass:.6g}"
            )
        weights = dest_shares[free]
        if weights.sum() > 0:
            shares[free] = remainder * weights / weights.sum()
        else:
            shares[free] = remainder / free.sum()
    return shares


def _quantize(shares: np.ndarray, size: int) -> np.ndarray:
    """Snap shares onto the count grid so quota counts are exact."""
    return np.rint(shares * size) / size


def _bloc_subgroup(bloc: BlocDef, interests: Sequence[str], probs: np.ndarray) -> Subgroup:
    traits = dict(bloc.traits)
    demographics = dict(traits.pop("demographics", {}) or {})
    return Subgroup(
        label=bloc.label,
        size=bloc.size,
        demographics=demographics,
        interest_probs=dict(zip(interests, probs.tolist())),
        **{k: traits.get(k) for k in _TRAIT_FIELDS},
    )


def bloc_spec(bloc: BlocDef) -> PopulationSpec:
    """Targeting spec selecting exactly one scenario bloc's members."""
    traits = dict(bloc.traits)
    demographics = dict(traits.pop("demographics", {}) or {})
    location = traits.get("location")
    return PopulationSpec(
        label=bloc.label,
        ethnic_affinity=traits.get("ethnic_affinity"),
        home_country=traits.get("home_country"),
        expat_origin=traits.get("expat_origin"),
        non_expat=bool(traits.get("non_expat", False)),
        language=traits.get("language"),
        locations=frozenset({location}) if location else frozenset(),
        demographic_selectors=demographics,
    )


def generate_world(
    scenario: PlantedScenario, seed: int, stochastic: bool = False
) -> SyntheticWorld:
    """Build a world whose exact interest shares realize the scenario.

    Shares are quantized onto each bloc's count grid (round(size *
    share) persons per interest), so the pipeline run on unrounded
    counts recovers the achieved ratios exactly.  The achieved
    per-interest AR of every expat bloc is recorded on the world.
    """
    interests = scenario.interests
    dest_shares = _quantize(
        _share_vector("dest", scenario.dest.shares, interests), scenario.dest.size
    )
    source_shares = _quantize(
        _share_vector("source", scenario.source.shares, interests), scenario.source.size
    )
    subgroups = [
        _bloc_subgroup(scenario.dest, interests, dest_shares),
        _bloc_subgroup(scenario.source, interests, source_shares),
    ]
    planted: dict[str, dict[str, float]] = {}
    dest_ratios = dest_shares / dest_shares.sum()
    for bloc in scenario.expats:
        if bloc.shares and bloc.ar_targets:
            raise ValueError(f"bloc {bloc.label!r} sets both shares and ar_targets")
        if bloc.shares:
            shares = _share_vector(bloc.label, bloc.shares, interests)
        elif bloc.ar_targets:
            shares = _derive_expat_shares(bloc, dest_shares, interests)
        else:
            raise MissingConfigError(f"bloc {bloc.label!r} needs shares or ar_targets")
        shares = _quantize(shares, bloc.size)
        subgroups.append(_bloc_subgroup(bloc, interests, shares))
        ratios = shares / shares.sum() if shares.sum() > 0 else shares
        planted[bloc.label] = {
            interest: float(ratios[k] / dest_ratios[k])
            for k, interest in enumerate(interests)
            if dest_ratios[k] > 0 and ratios[k] > 0
        }
    for extra in scenario.extra_subgroups:
        probs = np.array([extra.interest_probs.get(i, 0.0) for i in interests])
        subgroups.append(
            Subgroup(
                label=extra.label,
                size=extra.size,
                ethnic_affinity=extra.ethnic_affinity,
                home_country=extra.home_country,
                expat_origin=extra.expat_origin,
                language=extra.language,
                location=extra.location,
                demographics=extra.demographics,
                interest_probs=dict(zip(interests, _quantize(probs, extra.size).tolist())),
            )
        )
    return SyntheticWorld(
        seed=seed,
        subgroups=tuple(subgroups),
        rounding=scenario.rounding,
        floor=scenario.floor,
        stochastic=stochastic,
        planted=planted,
    )


def _percentile_linear(values: Sequence[float], p: float) -> float:
    """Linear-interpolation percentile, written out longhand so the
    oracle does not share the metrics module's numpy call."""
    data = sorted(values)
    if len(data) == 1:
        return data[0]
    position = (len(data) - 1) * p / 100.0
    lower = math.floor(position)
    upper = math.ceil(position)
    if lower == upper:
        return data[lower]
    weight = position - lower
    return data[lower] * (1.0 - weight) + data[upper] * weight


def oracle_assimilation(
    world: SyntheticWorld,
    expat: PopulationSpec,
    dest: PopulationSpec,
    source: PopulationSpec,
    catalog: InterestCatalog,
    p: float = 50.0,
) -> dict[str, float]:
    """Ground-truth per-interest AR over the filtered set.

    Computed from the world's exact interest shares, bypassing person
    sampling, the floor, and rounding.  The two-step filter is applied
    longhand here so this path stays independent of the metrics module.
    """
    ids = catalog.ids
    vectors = {}
    for name, spec in (("expat", expat), ("dest", dest), ("source", source)):
        counts = world.expected_counts(spec, ids)
        total = counts.sum()
        if total <= 0:
            raise AllZeroError(f"{name} population has no interest mass in this world")
        vectors[name] = counts / total
    e, d, s = vectors["expat"], vectors["dest"], vectors["source"]

    survivors = [k for k in range(len(ids)) if d[k] >= s[k]]
    if not survivors:
        raise EmptyResultError("oracle filter: step 1 removed every interest")
    deltas = [d[k] - s[k] for k in survivors]
    threshold = _percentile_linear(deltas, p)
    kept = [k for k in survivors if d[k] - s[k] > threshold]
    if not kept:
        raise EmptyResultError("oracle filter: no interest above the percentile threshold")
    return {ids[k]: float(e[k] / d[k]) for k in kept}


# --- scenario files -----------------------------------------------------


def _bloc_from_doc(doc: Mapping, what: str) -> BlocDef:
    try:
        return BlocDef(
            label=doc["label"],
            size=int(doc["size"]),
            traits=doc.get("traits", {}) or {},
            shares=doc.get("shares", {}) or {},
            ar_targets=doc.get("ar_targets", {}) or {},
        )
    except KeyError as exc:
        raise MissingConfigError(f"scenario {what} bloc is missing {exc}") from exc


def load_scenario(path: str | Path) -> tuple[PlantedScenario, int]:
    """Load a scenario file; returns (scenario, default seed)."""
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise MissingConfigError(f"{path} is not a scenario document")
    for key in ("interests", "dest", "source", "expats"):
        if key not in doc:
            raise MissingConfigError(f"scenario is missing {key!r}")
    extra = []
    for sub in doc.get("extra_subgroups", []) or []:
        traits = dict(sub.get("traits", {}) or {})
        demographics = dict(traits.pop("demographics", {}) or {})
        extra.append(
            Subgroup(
                label=sub["label"],
                size=int(sub["size"]),
                demographics=demographics,
                interest_probs=dict(sub.get("interest_probs", {}) or {}),
                **{k: traits.get(k) for k in _TRAIT_FIELDS},
            )
        )
    scenario = PlantedScenario(
        interests=tuple(doc["interests"]),
        dest=_bloc_from_doc(doc["dest"], "dest"),
        source=_bloc_from_doc(doc["source"], "source"),
        expats=tuple(_bloc_from_doc(b, "expat") for b in doc["expats"]),
        extra_subgroups=tuple(extra),
        rounding=doc.get("rounding"),
        floor=doc.get("floor"),
    )
    return scenario, int(doc.get("seed", 0))


def random_planted_scenario(
    seed: int,
    n_interests: int,
    scale: int = 2000,
    traits: Mapping[str, Mapping[str, object]] | None = None,
) -> PlantedScenario:
    """Scenario with AR targets that sit exactly on the count grid.

    Integer declaration counts are drawn first and every share and
    target is derived from them, so a pipeline run on unrounded counts
    can match the planted values to float precision.  Redraws until the
    two-step filter (p=50) keeps at least one interest.
    """
    if n_interests < 2:
        raise ValueError("need at least two interests")
    traits = traits or {}
    interests = tuple(f"genre-{k:03d}" for k in range(n_interests))
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        kd = rng.integers(1, scale, size=n_interests)
        ks = rng.integers(1, scale, size=n_interests)
        ke = rng.integers(1, scale, size=n_interests)
        d = kd / kd.sum()
        s = ks / ks.sum()
        e = ke / ke.sum()
        survivors = d >= s
        if not survivors.any():
            continue
        deltas = (d - s)[survivors]
        threshold = _percentile_linear(deltas.tolist(), 50.0)
        if not ((d - s)[survivors] > threshold).any():
            continue
        return PlantedScenario(
            interests=interests,
            dest=BlocDef(
                label="dest",
                size=int(kd.sum()),
                traits=traits.get("dest", {"ethnic_affinity": "dest-affinity", "home_country": "DST"}),
                shares=dict(zip(interests, d.tolist())),
            ),
            source=BlocDef(
                label="source",
                size=int(ks.sum()),
                traits=traits.get("source", {"home_country": "SRC"}),
                shares=dict(zip(interests, s.tolist())),
            ),
            expats=(
                BlocDef(
                    label="expat",
                    size=int(ke.sum()),
                    traits=traits.get(
                        "expat",
                        {"ethnic_affinity": "expat-affinity", "home_country": "DST", "expat_origin": "SRC"},
                    ),
                    ar_targets={
                        interest: float((e[k] / d[k]))
                        for k, interest in enumerate(interests)
                    },
                ),
            ),
        )
    raise InfeasibleScenarioError(f"no usable scenario found for seed {seed}")


# --- wire-protocol server ----------------------------------------------


class _CountHandler(http.server.BaseHTTPRequestHandler):
    world: SyntheticWorld = None  # type: ignore[assignment]

    def log_message(self, *args):  # silence default stderr chatter
        pass

    def _reply(self, status: int, doc: dict) -> None:
        body = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
            doc = json.loads(self.rfile.read(length))
            spec = PopulationSpec.from_predicates(doc["spec"])
            count, clamped = self.world.count_query(spec, doc.get("interest"))
            self._reply(200, {"count": count, "clamped": clamped})
        except InvalidTargetingError as exc:
            self._reply(
                400,
                {
                    "error": {
                        "type": "invalid-targeting",
                        "predicate": exc.predicate,
                        "value": exc.value,
                        "message": str(exc),
                    }
                },
            )
        except Exception as exc:  # malformed request, internal failure
            self._reply(500, {"error": {"type": "internal", "message": str(exc)}})


def make_server(world: SyntheticWorld, host: str = "127.0.0.1", port: int = 0):
    """HTTP server exposing the world over the shared wire protocol."""
    handler = type("BoundCountHandler", (_CountHandler,), {"world": world})
    return http.server.ThreadingHTTPServer((host, port), handler)


def serve_in_thread(world: SyntheticWorld, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a daemon thread; returns (server, endpoint url)."""
    server = make_server(world, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://{server.server_address[0]}:{server.server_address[1]}/count"
