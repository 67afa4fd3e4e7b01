"""Study configuration: one YAML file drives the whole pipeline.

The config declares the catalog source, populations and proxies, the
backend, demographic axes, and the parameters of every analysis step.
All randomness downstream flows from the single root seed declared
here; per-purpose seeds are derived deterministically from it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import yaml

from .audience import RateLimitPolicy
from .catalog import (
    DEFAULT_CATALOG_FLOOR,
    DemographicAxis,
    GenerationProxy,
    InterestCatalog,
    ORDINAL_AXES,
    PopulationSpec,
    ProxySettings,
    build_catalog,
    resolve_proxy,
)
from .errors import MissingConfigError


def derive_seed(root: int, purpose: str) -> int:
    """Stable per-purpose seed derived from the root seed."""
    digest = hashlib.sha256(f"{root}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


@dataclass(frozen=True, slots=True)
class BackendConfig:
    kind: str  # http | sim | snapshot
    endpoint: Optional[str] = None
    scenario: Optional[Path] = None
    snapshot: Optional[Path] = None
    budget: Optional[int] = None
    rate: RateLimitPolicy = RateLimitPolicy()

    def __post_init__(self):
        if self.kind not in ("http", "sim", "snapshot"):
            raise MissingConfigError(f"unknown backend kind {self.kind!r}")


@dataclass(frozen=True, slots=True)
class PopulationTriple:
    """One (expat, destination, source) comparison."""

    label: str
    expat: str
    dest: str
    source: str


@dataclass(frozen=True, slots=True)
class ValidationConfig:
    proxies: tuple[str, ...]
    axes: tuple[str, ...]
    ground_truth: Path
    trials: int = 1000


@dataclass(frozen=True, slots=True)
class FamilyMember:
    label: str  # generation label used in the regression
    population: str  # population registry key


@dataclass(frozen=True, slots=True)
class RegressionConfig:
    family: tuple[FamilyMember, ...]
    reference: str
    dest: str
    source: str
    axes: tuple[str, ...]
    interactions: tuple[tuple[str, str], ...]
    top_k: int = 20


@dataclass(frozen=True, slots=True)
class KdeConfig:
    grid_size: int = 256
    bandwidth: str | float = "silverman"


@dataclass(frozen=True, slots=True)
class StudyConfig:
    study_id: str
    seed: int
    out_dir: Path
    catalog_path: Path
    catalog_floor: int
    percentile: float
    bootstrap: int
    backend: BackendConfig
    axes: Mapping[str, DemographicAxis]
    populations: Mapping[str, PopulationSpec]
    pairs: tuple[PopulationTriple, ...]
    compare_groups: tuple[PopulationTriple, ...]
    kde: KdeConfig
    validation: Optional[ValidationConfig]
    regression: Optional[RegressionConfig]
    config_hash: str
    raw: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "axes", dict(self.axes))
        object.__setattr__(self, "populations", dict(self.populations))
        object.__setattr__(self, "raw", dict(self.raw))

    def population(self, label: str) -> PopulationSpec:
        try:
            return self.populations[label]
        except KeyError:
            raise MissingConfigError(f"no population named {label!r}") from None

    def axis(self, name: str) -> DemographicAxis:
        try:
            return self.axes[name]
        except KeyError:
            raise MissingConfigError(f"no axis named {name!r}") from None

    def seed_for(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose)

    def load_catalog(self) -> InterestCatalog:
        return build_catalog(read_genre_csv(self.catalog_path), floor=self.catalog_floor)


def read_genre_csv(path: str | Path) -> list[tuple[str, int]]:
    """Read a genre list: CSV with name and worldwide_audience columns."""
    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            rows.append((row["name"], int(row["worldwide_audience"])))
    if not rows:
        raise MissingConfigError(f"genre file {path} is empty")
    return rows


def _resolve_path(base: Path, value: str | None) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else base / path


def _require_exists(path: Optional[Path], what: str) -> Optional[Path]:
    if path is not None and not path.exists():
        raise MissingConfigError(f"{what} file not found: {path}")
    return path


def _spec_from_doc(doc: Mapping) -> PopulationSpec:
    if "label" not in doc:
        raise MissingConfigError("population entry has no label")
    return PopulationSpec(
        label=doc["label"],
        ethnic_affinity=doc.get("ethnic_affinity"),
        home_country=doc.get("home_country"),
        expat_origin=doc.get("expat_origin"),
        non_expat=bool(doc.get("non_expat", False)),
        language=doc.get("language"),
        interests_required=frozenset(doc.get("interests_required") or ()),
        locations=frozenset(doc.get("locations") or ()),
        demographic_selectors=dict(doc.get("demographic_selectors") or {}),
    )


def _triple_from_doc(doc: Mapping) -> PopulationTriple:
    for key in ("expat", "dest", "source"):
        if key not in doc:
            raise MissingConfigError(f"comparison entry is missing {key!r}")
    return PopulationTriple(
        label=doc.get("label", f"{doc['expat']} vs {doc['dest']}"),
        expat=doc["expat"],
        dest=doc["dest"],
        source=doc["source"],
    )


def load_config(path: str | Path) -> StudyConfig:
    path = Path(path)
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise MissingConfigError(f"{path} is not a study config")
    base = path.parent
    config_hash = hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()[:16]

    catalog_doc = doc.get("catalog") or {}
    catalog_path = _require_exists(
        _resolve_path(base, catalog_doc.get("path")), "catalog"
    )
    if catalog_path is None:
        raise MissingConfigError("config has no catalog.path")

    backend_doc = doc.get("backend") or {}
    rate_doc = backend_doc.get("rate") or {}
    backend = BackendConfig(
        kind=backend_doc.get("kind", "sim"),
        endpoint=backend_doc.get("endpoint"),
        scenario=_require_exists(
            _resolve_path(base, backend_doc.get("scenario")), "scenario"
        ),
        snapshot=_resolve_path(base, backend_doc.get("snapshot")),
        budget=backend_doc.get("budget"),
        rate=RateLimitPolicy(
            max_requests_per_window=int(rate_doc.get("max_requests_per_window", 1000)),
            window_seconds=float(rate_doc.get("window_seconds", 60.0)),
            max_retries=int(rate_doc.get("max_retries", 3)),
            backoff_seconds=tuple(rate_doc.get("backoff_seconds", (1.0, 5.0, 30.0))),
        ),
    )
    if backend.kind == "sim" and backend.scenario is None:
        raise MissingConfigError("sim backend requires backend.scenario")
    if backend.kind == "http" and not backend.endpoint:
        raise MissingConfigError("http backend requires backend.endpoint")

    axes: dict[str, DemographicAxis] = {}
    for name, axis_doc in (doc.get("axes") or {}).items():
        axes[name] = DemographicAxis(
            name=name,
            categories=tuple(axis_doc["categories"]),
            ordinal=bool(axis_doc.get("ordinal", name in ORDINAL_AXES)),
            reference=axis_doc.get("reference"),
        )

    populations: dict[str, PopulationSpec] = {}
    for pop_doc in doc.get("populations") or []:
        spec = _spec_from_doc(pop_doc)
        if spec.label in populations:
            raise MissingConfigError(f"duplicate population label {spec.label!r}")
        populations[spec.label] = spec

    proxies_doc = doc.get("proxies") or {}
    if proxies_doc:
        settings_doc = proxies_doc.get("settings") or {}
        try:
            settings = ProxySettings(
                affinity=settings_doc["affinity"],
                destination_country=settings_doc["destination_country"],
                origin_country=settings_doc["origin_country"],
                origin_interest=settings_doc["origin_interest"],
                origin_language=settings_doc["origin_language"],
                group_name=settings_doc["group_name"],
                community_locations=tuple(settings_doc.get("community_locations") or ()),
            )
        except KeyError as exc:
            raise MissingConfigError(f"proxies.settings is missing {exc}") from exc
        for kind in proxies_doc.get("kinds") or []:
            spec = resolve_proxy(GenerationProxy(kind), settings)
            if spec.label in populations:
                raise MissingConfigError(f"duplicate population label {spec.label!r}")
            populations[spec.label] = spec

    pairs = tuple(_triple_from_doc(p) for p in doc.get("pairs") or [])
    compare_doc = doc.get("compare") or {}
    compare_groups = tuple(
        _triple_from_doc(g) for g in compare_doc.get("groups") or []
    )

    kde_doc = doc.get("kde") or {}
    kde = KdeConfig(
        grid_size=int(kde_doc.get("grid_size", 256)),
        bandwidth=kde_doc.get("bandwidth", "silverman"),
    )

    validation = None
    validation_doc = doc.get("validation") or {}
    if validation_doc:
        ground_truth = _require_exists(
            _resolve_path(base, validation_doc.get("ground_truth")), "ground truth"
        )
        if ground_truth is None:
            raise MissingConfigError("validation requires ground_truth")
        validation = ValidationConfig(
            proxies=tuple(validation_doc.get("proxies") or ()),
            axes=tuple(validation_doc.get("axes") or ()),
            ground_truth=ground_truth,
            trials=int(validation_doc.get("trials", 1000)),
        )

    regression = None
    regression_doc = doc.get("regression") or {}
    if regression_doc:
        family = tuple(
            FamilyMember(label=m["label"], population=m["population"])
            for m in regression_doc.get("family") or []
        )
        if not family:
            raise MissingConfigError("regression requires a population family")
        regression = RegressionConfig(
            family=family,
            reference=regression_doc.get("reference", family[0].label),
            dest=regression_doc["dest"],
            source=regression_doc["source"],
            axes=tuple(regression_doc.get("axes") or ()),
            interactions=tuple(
                (a, b) for a, b in (regression_doc.get("interactions") or [])
            ),
            top_k=int(regression_doc.get("top_k", 20)),
        )

    config = StudyConfig(
        study_id=doc.get("study_id", path.stem),
        seed=int(doc.get("seed", 0)),
        out_dir=_resolve_path(base, doc.get("out_dir", "out")),
        catalog_path=catalog_path,
        catalog_floor=int(catalog_doc.get("floor", DEFAULT_CATALOG_FLOOR)),
        percentile=float(doc.get("percentile", 50.0)),
        bootstrap=int(doc.get("bootstrap", 2000)),
        backend=backend,
        axes=axes,
        populations=populations,
        pairs=pairs,
        compare_groups=compare_groups,
        kde=kde,
        validation=validation,
        regression=regression,
        config_hash=config_hash,
        raw=doc,
    )
    _check_references(config)
    return config


def _check_references(config: StudyConfig) -> None:
    def check_triple(triple: PopulationTriple):
        for label in (triple.expat, triple.dest, triple.source):
            config.population(label)

    for triple in config.pairs:
        check_triple(triple)
    for triple in config.compare_groups:
        check_triple(triple)
    if config.validation:
        for label in config.validation.proxies:
            config.population(label)
        for axis in config.validation.axes:
            config.axis(axis)
    if config.regression:
        for member in config.regression.family:
            config.population(member.population)
        config.population(config.regression.dest)
        config.population(config.regression.source)
        for axis in config.regression.axes:
            config.axis(axis)
        valid_axes = set(config.regression.axes) | {"generation"}
        for a, b in config.regression.interactions:
            if a not in valid_axes or b not in valid_axes:
                raise MissingConfigError(
                    f"interaction ({a}, {b}) references an axis not in the regression"
                )
