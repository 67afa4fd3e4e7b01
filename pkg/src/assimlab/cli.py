"""Command-line orchestration of a full study.

Subcommands: collect (plan + fetch snapshot), validate (demographic
proportions + KL report), ar (filter + assimilation ratios + medians),
compare (grouped medians + Kruskal test), kde (density export), regress
(main effects + configured interaction models), sim (generate / serve /
init scenarios).

Every run writes data artifacts deterministically (config hash and seed
embedded); wall-clock timestamps live only in run_meta.json so reruns
stay byte-identical.
"""

from __future__ import annotations

import dataclasses
import functools
import itertools
import json
import math
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import yaml

from . import audience, metrics, report, simulator, stats
from .audience import (
    AudienceQuery,
    HttpBackend,
    ManualClock,
    QueryPlan,
    Snapshot,
    SnapshotBackend,
    SystemClock,
)
from .catalog import Interest, InterestCatalog, PopulationSpec, slugify
from .errors import (
    AssimlabError,
    MissingConfigError,
    PlanTooLargeError,
    SnapshotIncompleteError,
)
from .simulator import SimBackend, generate_world, load_scenario, serve_in_thread
from .studyconfig import StudyConfig, load_config

AUTH_ENV_VAR = "ASSIMLAB_AUTH"


def _fail(exc: BaseException) -> None:
    doc = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    click.echo(json.dumps(doc, sort_keys=True), err=True)
    sys.exit(1)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (AssimlabError, OSError, ValueError) as exc:
            _fail(exc)

    return wrapper


@click.group()
def main():
    """Measure cultural assimilation from marginal audience counts."""


# --- shared plumbing ----------------------------------------------------


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the root seed.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None, help="Override the output directory.")(fn)
    return fn


def _load(config_path: str, seed: int | None, out_dir: str | None) -> StudyConfig:
    config = load_config(config_path)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    if out_dir is not None:
        config = dataclasses.replace(config, out_dir=Path(out_dir))
    config.out_dir.mkdir(parents=True, exist_ok=True)
    return config


def _meta(config: StudyConfig) -> dict:
    return {"config_hash": config.config_hash, "seed": config.seed}


def _write_run_meta(config: StudyConfig, command: str, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "config_hash": config.config_hash,
        "seed": config.seed,
        "study_id": config.study_id,
        "finished_at": time.time(),
    }
    if extra:
        doc.update(extra)
    report.write_json(config.out_dir / "run_meta.json", doc)


def _build_backend(
    config: StudyConfig,
    kind_override: str | None = None,
    endpoint_override: str | None = None,
):
    kind = kind_override or config.backend.kind
    if kind == "sim":
        if config.backend.scenario is None:
            raise MissingConfigError("sim backend requires backend.scenario")
        scenario, _ = load_scenario(config.backend.scenario)
        world = generate_world(scenario, seed=config.seed_for("world"))
        return SimBackend(world), ManualClock()
    if kind == "snapshot":
        if config.backend.snapshot is None:
            raise MissingConfigError("snapshot backend requires backend.snapshot")
        return SnapshotBackend(Snapshot.read(config.backend.snapshot)), ManualClock()
    if kind == "http":
        endpoint = endpoint_override or config.backend.endpoint
        if not endpoint:
            raise MissingConfigError("http backend requires an endpoint")
        return HttpBackend(endpoint, auth_header=os.environ.get(AUTH_ENV_VAR)), SystemClock()
    raise MissingConfigError(f"unknown backend kind {kind!r}")


def _top_k_catalog(catalog: InterestCatalog, k: int) -> InterestCatalog:
    """Sub-catalog of the k largest worldwide audiences (ties by id)."""
    ranked = sorted(catalog.interests, key=lambda i: (-i.worldwide_audience, i.id))
    chosen = sorted(ranked[:k], key=lambda i: i.id)
    return InterestCatalog(tuple(chosen), floor=catalog.floor)


def _triple_specs(config: StudyConfig) -> list[PopulationSpec]:
    labels: list[str] = []
    for triple in list(config.pairs) + list(config.compare_groups):
        for label in (triple.expat, triple.dest, triple.source):
            if label not in labels:
                labels.append(label)
    return [config.population(label) for label in labels]


def build_study_plan(config: StudyConfig, catalog: InterestCatalog) -> QueryPlan:
    """Every query the configured analyses will need, deduplicated."""
    plans = []
    specs = _triple_specs(config)
    if specs:
        plans.append(audience.plan_queries(specs, catalog))
    if config.validation:
        proxies = [config.population(p) for p in config.validation.proxies]
        axes = [config.axis(a) for a in config.validation.axes]
        plans.append(audience.plan_marginals(proxies, axes))
    if config.regression:
        reg = config.regression
        mini = _top_k_catalog(catalog, reg.top_k)
        family = [config.population(m.population) for m in reg.family]
        axes = [config.axis(a) for a in reg.axes]
        plans.append(audience.plan_queries(family, mini, cross_sections=axes))
        plans.append(
            audience.plan_queries(
                [config.population(reg.dest), config.population(reg.source)], mini
            )
        )
    if not plans:
        raise MissingConfigError("config declares no populations to query")
    plan = audience.merge_plans(*plans)
    budget = config.backend.budget
    if budget is not None and plan.estimated_request_count > budget:
        raise PlanTooLargeError(
            f"plan needs {plan.estimated_request_count} requests; budget is {budget}"
        )
    return plan


def _snapshot_path(config: StudyConfig) -> Path:
    return config.out_dir / "snapshot.ndjson"


def _read_snapshot(config: StudyConfig) -> Snapshot:
    path = _snapshot_path(config)
    if not path.exists():
        raise SnapshotIncompleteError(f"no snapshot at {path}; run collect first")
    return Snapshot.read(path)


class CountSource:
    """Snapshot-backed count lookup with partial-data accounting."""

    def __init__(self, snapshot: Snapshot, allow_partial: bool):
        self._map = snapshot.count_map()
        self.allow_partial = allow_partial
        self.missing: list[str] = []

    def counts(self, spec: PopulationSpec, catalog: InterestCatalog) -> dict[str, int]:
        counts: dict[str, int] = {}
        missing = []
        for interest_id in catalog.ids:
            hit = self._map.get(AudienceQuery(spec, interest_id).request_id)
            if hit is None:
                missing.append(f"{spec.label}/{interest_id}")
            else:
                counts[interest_id] = hit[0]
        if missing and not self.allow_partial:
            raise SnapshotIncompleteError(
                f"snapshot is missing {len(missing)} planned queries "
                f"(first: {missing[0]}); pass --allow-partial to proceed"
            )
        self.missing.extend(missing)
        return counts

    def total(self, spec: PopulationSpec) -> int:
        hit = self._map.get(AudienceQuery(spec, None).request_id)
        if hit is None:
            if not self.allow_partial:
                raise SnapshotIncompleteError(
                    f"snapshot is missing the total for {spec.label!r}"
                )
            self.missing.append(f"{spec.label}/<total>")
            return 0
        return hit[0]


def _pair_report(
    config: StudyConfig,
    source_counts: CountSource,
    catalog: InterestCatalog,
    triple,
) -> metrics.AssimilationReport:
    expat = config.population(triple.expat)
    dest = config.population(triple.dest)
    source = config.population(triple.source)
    vec_e = metrics.interest_ratios(source_counts.counts(expat, catalog), catalog, expat.label)
    vec_d = metrics.interest_ratios(source_counts.counts(dest, catalog), catalog, dest.label)
    vec_s = metrics.interest_ratios(source_counts.counts(source, catalog), catalog, source.label)
    filt = metrics.filter_interests(vec_d, vec_s, p=config.percentile)
    rep = metrics.assimilation_ratios(vec_e, vec_d, filt)
    ci = metrics.median_ar_ci(
        rep, n_boot=config.bootstrap, seed=config.seed_for(f"bootstrap:{triple.label}")
    )
    return rep.with_ci(ci)


# --- commands -----------------------------------------------------------


@main.command()
@_common_options
@click.option("--backend", "backend_kind", type=click.Choice(["http", "sim", "snapshot"]), default=None)
@click.option("--endpoint", default=None, help="HTTP backend URL override.")
@click.option("--budget", type=int, default=None, help="Request budget override.")
@click.option("--rate", default=None, help="Rate limit as REQUESTS/SECONDS.")
@click.option("--resume", "resume_path", type=click.Path(), default=None,
              help="Snapshot file to resume into (default: <out>/snapshot.ndjson).")
@_guarded
def collect(config_path, seed, out_dir, backend_kind, endpoint, budget, rate, resume_path):
    """Plan all queries and fetch them into a snapshot."""
    config = _load(config_path, seed, out_dir)
    if budget is not None:
        config = dataclasses.replace(
            config, backend=dataclasses.replace(config.backend, budget=budget)
        )
    policy = config.backend.rate
    if rate is not None:
        try:
            requests_part, window_part = rate.split("/")
            policy = dataclasses.replace(
                policy,
                max_requests_per_window=int(requests_part),
                window_seconds=float(window_part),
            )
        except ValueError:
            raise MissingConfigError(f"--rate must look like 100/60, got {rate!r}")
    catalog = config.load_catalog()
    plan = build_study_plan(config, catalog)
    backend, clock = _build_backend(config, backend_kind, endpoint)
    path = Path(resume_path) if resume_path else _snapshot_path(config)
    click.echo(f"plan: {plan.estimated_request_count} queries -> {path}")
    snapshot = audience.fetch_snapshot(
        backend,
        plan,
        policy=policy,
        clock=clock,
        study_id=config.study_id,
        path=path,
    )
    failures = [r for r in snapshot.records if r.status != "ok"]
    _write_run_meta(config, "collect", {"queries": len(snapshot.records), "failures": len(failures)})
    click.echo(f"collected {len(snapshot.records)} records ({len(failures)} failed)")


@main.command()
@_common_options
@click.option("--allow-partial", is_flag=True, default=False)
@_guarded
def ar(config_path, seed, out_dir, allow_partial):
    """Filter interests and compute assimilation ratios per pair."""
    config = _load(config_path, seed, out_dir)
    if not config.pairs:
        raise MissingConfigError("config declares no pairs")
    catalog = config.load_catalog()
    source_counts = CountSource(_read_snapshot(config), allow_partial)
    for triple in config.pairs:
        rep = _pair_report(config, source_counts, catalog, triple)
        slug = slugify(triple.label)
        rows = [
            {
                "interest_id": interest_id,
                "ar": repr(float(rep.ar[k])),
                "log_ar": repr(float(rep.log_ar[k])),
                "epsilon_substituted": int(interest_id in rep.flagged),
            }
            for k, interest_id in enumerate(rep.interest_ids)
        ]
        report.write_csv(
            config.out_dir / f"ar_{slug}.csv",
            rows,
            ["interest_id", "ar", "log_ar", "epsilon_substituted"],
            meta=_meta(config),
        )
        report.write_json(
            config.out_dir / f"ar_{slug}_summary.json",
            {
                "expat": rep.expat_label,
                "dest": rep.dest_label,
                "source": rep.source_label,
                "median_log_ar": rep.median_log_ar,
                "ci_low": rep.ci_low,
                "ci_high": rep.ci_high,
                "n_interests": len(rep.interest_ids),
                "filter": {
                    "percentile": rep.filter.percentile,
                    "threshold": rep.filter.threshold,
                    "delta_base": rep.filter.delta_base,
                    "kept": list(rep.filter.kept),
                    "removed_step1": list(rep.filter.removed_step1),
                    "removed_step2": list(rep.filter.removed_step2),
                },
                "epsilon": rep.epsilon,
                "flagged": list(rep.flagged),
                "missing_cells": source_counts.missing,
                **_meta(config),
            },
        )
        click.echo(
            f"{triple.label}: median log AR {rep.median_log_ar:+.4f} "
            f"[{rep.ci_low:+.4f}, {rep.ci_high:+.4f}] over {len(rep.interest_ids)} interests"
        )
    _write_run_meta(config, "ar")


@main.command()
@_common_options
@click.option("--allow-partial", is_flag=True, default=False)
@_guarded
def compare(config_path, seed, out_dir, allow_partial):
    """Grouped median assimilation with bootstrap CIs and a Kruskal test."""
    config = _load(config_path, seed, out_dir)
    groups = config.compare_groups or config.pairs
    if not groups:
        raise MissingConfigError("config declares no compare groups or pairs")
    catalog = config.load_catalog()
    source_counts = CountSource(_read_snapshot(config), allow_partial)
    rows = []
    scores: dict[str, list[float]] = {}
    bars = []
    for triple in groups:
        rep = _pair_report(config, source_counts, catalog, triple)
        rows.append(
            {
                "group": triple.label,
                "n_interests": len(rep.interest_ids),
                "median_log_ar": repr(rep.median_log_ar),
                "ci_low": repr(rep.ci_low),
                "ci_high": repr(rep.ci_high),
            }
        )
        scores[triple.label] = rep.log_ar.tolist()
        bars.append((triple.label, rep.median_log_ar, rep.ci_low, rep.ci_high))
    report.write_csv(
        config.out_dir / "compare.csv",
        rows,
        ["group", "n_interests", "median_log_ar", "ci_low", "ci_high"],
        meta=_meta(config),
    )
    tests: dict[str, object] = {"groups": {g: len(v) for g, v in scores.items()}, **_meta(config)}
    if len(scores) >= 2:
        h, p_value = stats.kruskal_wallis(scores)
        tests.update({"kruskal_h": h, "kruskal_p": p_value})
        click.echo(f"Kruskal-Wallis H={h:.3f} p={p_value:.4g} over {len(scores)} groups")
    report.write_json(config.out_dir / "compare_tests.json", tests)
    report.atomic_write_text(
        config.out_dir / "compare.svg", report.svg_median_bars(bars, meta=_meta(config))
    )
    _write_run_meta(config, "compare")
    for row in rows:
        click.echo(
            f"{row['group']}: median {float(row['median_log_ar']):+.4f} "
            f"[{float(row['ci_low']):+.4f}, {float(row['ci_high']):+.4f}]"
        )


@main.command()
@_common_options
@click.option("--allow-partial", is_flag=True, default=False)
@_guarded
def kde(config_path, seed, out_dir, allow_partial):
    """Smoothed density of log assimilation scores per group."""
    config = _load(config_path, seed, out_dir)
    groups = config.compare_groups or config.pairs
    if not groups:
        raise MissingConfigError("config declares no groups for kde")
    catalog = config.load_catalog()
    source_counts = CountSource(_read_snapshot(config), allow_partial)
    curves = {}
    for triple in groups:
        rep = _pair_report(config, source_counts, catalog, triple)
        curve = metrics.kde_density(
            rep.log_ar, bandwidth=config.kde.bandwidth, grid_size=config.kde.grid_size
        )
        slug = slugify(triple.label)
        rows = [
            {"log_ar": repr(float(x)), "density": repr(float(y))}
            for x, y in zip(curve.grid, curve.density)
        ]
        report.write_csv(
            config.out_dir / f"kde_{slug}.csv",
            rows,
            ["log_ar", "density"],
            meta=_meta(config),
        )
        curves[triple.label] = (curve.grid.tolist(), curve.density.tolist())
        click.echo(f"{triple.label}: bandwidth {curve.bandwidth:.4f}")
    report.atomic_write_text(
        config.out_dir / "kde.svg", report.svg_density(curves, meta=_meta(config))
    )
    _write_run_meta(config, "kde")


@main.command()
@_common_options
@click.option("--allow-partial", is_flag=True, default=False)
@_guarded
def validate(config_path, seed, out_dir, allow_partial):
    """Check proxy demographics against ground truth via KL divergence."""
    config = _load(config_path, seed, out_dir)
    if config.validation is None:
        raise MissingConfigError("config has no validation section")
    val = config.validation
    truth_doc = json.loads(Path(val.ground_truth).read_text(encoding="utf-8"))
    truth_axes = truth_doc.get("axes") or {}
    source_counts = CountSource(_read_snapshot(config), allow_partial)
    results = {}
    all_pass = True
    for proxy_label in val.proxies:
        spec = config.population(proxy_label)
        estimated, truth = [], []
        for axis_name in val.axes:
            axis = config.axis(axis_name)
            cell_counts = {}
            for category in axis.categories:
                cell_counts[category] = source_counts.total(
                    spec.with_selectors({axis_name: category})
                )
            estimated.append(metrics.demographic_proportions(cell_counts, axis))
            if axis_name not in truth_axes:
                raise MissingConfigError(f"ground truth has no axis {axis_name!r}")
            truth.append(metrics.demographic_proportions(truth_axes[axis_name], axis))
        outcome = metrics.validate_proxy(
            estimated,
            truth,
            n_trials=val.trials,
            seed=config.seed_for(f"kl-baseline:{proxy_label}"),
        )
        all_pass = all_pass and outcome.significantly_lower
        results[proxy_label] = {
            "observed_kl": outcome.observed_kl,
            "per_axis_kl": dict(outcome.per_axis_kl),
            "baseline_mean": outcome.baseline_mean,
            "baseline_percentiles": dict(outcome.baseline_percentiles),
            "baseline_quantile": outcome.baseline_quantile,
            "n_trials": outcome.n_trials,
            "verdict": "pass" if outcome.significantly_lower else "fail",
            "smoothed_axes": list(outcome.smoothed_axes),
        }
        click.echo(
            f"{proxy_label}: KL={outcome.observed_kl:.4f} vs chance mean "
            f"{outcome.baseline_mean:.4f} -> {results[proxy_label]['verdict']}"
        )
    report.write_json(
        config.out_dir / "validation.json",
        {"proxies": results, "verdict": "pass" if all_pass else "fail", **_meta(config)},
    )
    _write_run_meta(config, "validate")


def _regression_rows(config: StudyConfig, source_counts: CountSource, catalog: InterestCatalog):
    reg = config.regression
    mini = _top_k_catalog(catalog, reg.top_k)
    dest = config.population(reg.dest)
    source = config.population(reg.source)
    vec_d = metrics.interest_ratios(source_counts.counts(dest, mini), mini, dest.label)
    vec_s = metrics.interest_ratios(source_counts.counts(source, mini), mini, source.label)
    filt = metrics.filter_interests(vec_d, vec_s, p=config.percentile)

    axes = [config.axis(a) for a in reg.axes]
    rows: list[dict[str, str]] = []
    responses: list[float] = []
    skipped: list[str] = []
    for member in reg.family:
        base_spec = config.population(member.population)
        for combo in itertools.product(*(axis.categories for axis in axes)):
            selectors = {axis.name: cat for axis, cat in zip(axes, combo)}
            cell = base_spec.with_selectors(selectors)
            counts = source_counts.counts(cell, mini)
            if sum(counts.values()) <= 0:
                skipped.append(cell.label)
                continue
            vec_cell = metrics.interest_ratios(counts, mini, cell.label)
            rep = metrics.assimilation_ratios(vec_cell, vec_d, filt)
            for k, interest_id in enumerate(rep.interest_ids):
                rows.append({**selectors, "generation": member.label})
                responses.append(float(rep.log_ar[k]))
    return rows, responses, axes, filt, skipped


@main.command()
@_common_options
@click.option("--allow-partial", is_flag=True, default=False)
@_guarded
def regress(config_path, seed, out_dir, allow_partial):
    """Regress log assimilation on demographic dummies and interactions."""
    config = _load(config_path, seed, out_dir)
    if config.regression is None:
        raise MissingConfigError("config has no regression section")
    reg = config.regression
    catalog = config.load_catalog()
    source_counts = CountSource(_read_snapshot(config), allow_partial)
    rows, responses, axes, filt, skipped = _regression_rows(config, source_counts, catalog)
    if not rows:
        raise MissingConfigError("no usable regression cells in the snapshot")

    encode_axes = [
        stats.CategoricalAxis(
            name=a.name,
            categories=a.categories,
            reference=a.reference or a.categories[0],
        )
        for a in axes
    ]
    encode_axes.append(
        stats.CategoricalAxis(
            name="generation",
            categories=tuple(m.label for m in reg.family),
            reference=reg.reference,
        )
    )
    models: dict[str, tuple[tuple[str, str], ...]] = {"main": ()}
    for a, b in reg.interactions:
        models[f"{slugify(a)}-x-{slugify(b)}"] = ((a, b),)
    for model_name, interactions in models.items():
        design = stats.encode_design(rows, responses, encode_axes, interactions)
        fit = stats.ols_fit(design)
        report.write_csv(
            config.out_dir / f"regression_{model_name}.csv",
            report.regression_rows(fit),
            ["section", "term", "estimate", "se", "p_value", "stars"],
            meta=_meta(config),
        )
        title = f"Regression on log assimilation score ({model_name})"
        report.atomic_write_text(
            config.out_dir / f"regression_{model_name}.txt",
            report.regression_text_table(fit, title=title),
        )
        click.echo(
            f"{model_name}: N={fit.n_obs} R2={fit.r_squared:.3f} F={fit.f_statistic:.1f}"
        )
    report.write_json(
        config.out_dir / "regression_meta.json",
        {
            "kept_interests": list(filt.kept),
            "skipped_cells": skipped,
            "models": sorted(models),
            "observations": len(rows),
            **_meta(config),
        },
    )
    _write_run_meta(config, "regress")


# --- sim subcommands ----------------------------------------------------


@main.group()
def sim():
    """Generate, serve, and bootstrap synthetic scenarios."""


@sim.command("generate")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out_path", type=click.Path(), default="world.json")
@_guarded
def sim_generate(scenario_path, seed, out_path):
    """Materialize a scenario into a world summary document."""
    scenario, default_seed = load_scenario(scenario_path)
    world = generate_world(scenario, seed=seed if seed is not None else default_seed)
    doc = {
        "seed": world.seed,
        "rounding": world.rounding,
        "floor": world.floor,
        "total_population": world.total_population,
        "interests": list(world.interests),
        "planted_ar": {k: dict(v) for k, v in world.planted.items()},
        "subgroups": [
            {
                "label": g.label,
                "size": g.size,
                "ethnic_affinity": g.ethnic_affinity,
                "home_country": g.home_country,
                "expat_origin": g.expat_origin,
                "language": g.language,
                "location": g.location,
                "demographics": dict(g.demographics),
                "interest_probs": dict(g.interest_probs),
            }
            for g in world.subgroups
        ],
    }
    report.write_json(out_path, doc)
    click.echo(f"world with {len(world.subgroups)} subgroups -> {out_path}")


@sim.command("serve")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8040)
@_guarded
def sim_serve(scenario_path, seed, host, port):
    """Serve a scenario world over the shared count wire protocol."""
    scenario, default_seed = load_scenario(scenario_path)
    world = generate_world(scenario, seed=seed if seed is not None else default_seed)
    server, endpoint = serve_in_thread(world, host=host, port=port)
    click.echo(f"serving {len(world.subgroups)} subgroups at {endpoint}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.shutdown()


# --- demo study ---------------------------------------------------------

_DEMO_GENRES = [
    ("Classic rock", 5_000_000),
    ("Hip hop music", 9_000_000),
    ("Rap", 7_000_000),
    ("Country music", 6_000_000),
    ("Pop music", 12_000_000),
    ("Alternative rock", 8_000_000),
    ("Progressive rock", 4_000_000),
    ("Rock and roll", 6_500_000),
    ("Gangsta rap", 1_500_000),
    ("Norteño", 1_200_000),
    ("Banda", 900_000),
    ("Cumbia", 2_500_000),
]

_DEMO_DEST_SHARES = {
    "classic-rock": 0.13, "hip-hop-music": 0.11, "rap": 0.07, "country-music": 0.12,
    "pop-music": 0.13, "alternative-rock": 0.11, "progressive-rock": 0.08,
    "rock-and-roll": 0.10, "gangsta-rap": 0.03, "norteno": 0.03, "banda": 0.03,
    "cumbia": 0.06, "mexico": 0.0,
}
_DEMO_SOURCE_SHARES = {
    "classic-rock": 0.03, "hip-hop-music": 0.09, "rap": 0.08, "country-music": 0.01,
    "pop-music": 0.09, "alternative-rock": 0.02, "progressive-rock": 0.02,
    "rock-and-roll": 0.03, "gangsta-rap": 0.07, "norteno": 0.22, "banda": 0.18,
    "cumbia": 0.16, "mexico": 0.0,
}
_DEMO_AR_TARGETS = {
    "classic-rock": 1.05, "hip-hop-music": 1.10, "country-music": 0.95,
    "pop-music": 1.00, "alternative-rock": 1.10, "progressive-rock": 1.00,
    "rock-and-roll": 1.00,
}
_DEMO_AGES = ("13-18", "19-28", "29-38")
_DEMO_GENDERS = ("Female", "Male")


def _demo_cells(label_prefix: str, traits: dict, sizes: dict, tilt: float):
    """Demographic cell subgroups with an age-graded taste tilt."""
    cells = []
    for age_idx, age in enumerate(_DEMO_AGES):
        for gender in _DEMO_GENDERS:
            probs = {"mexico": 0.85}
            for interest_id, dest_share in _DEMO_DEST_SHARES.items():
                if interest_id == "mexico":
                    continue
                blend = 0.7 * dest_share + 0.3 * _DEMO_SOURCE_SHARES[interest_id]
                if interest_id in ("hip-hop-music", "rap", "gangsta-rap"):
                    blend *= 1.0 + tilt * (len(_DEMO_AGES) - 1 - age_idx)
                elif interest_id in ("classic-rock", "country-music", "rock-and-roll"):
                    blend *= 1.0 + tilt * age_idx
                probs[interest_id] = min(blend, 1.0)
            cells.append(
                {
                    "label": f"{label_prefix} {gender} {age}",
                    "size": sizes[(gender, age)],
                    "traits": {**traits, "demographics": {"gender": gender, "age": age}},
                    "interest_probs": probs,
                }
            )
    return cells


@sim.command("init")
@click.option("--out", "out_path", type=click.Path(), default="demo")
@_guarded
def sim_init(out_path):
    """Write a ready-to-run demo study (genres, scenario, config, truth)."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)

    genre_lines = ["name,worldwide_audience"] + [
        f"{name},{aud}" for name, aud in _DEMO_GENRES
    ]
    report.atomic_write_text(out / "genres.csv", "\n".join(genre_lines) + "\n")

    ma_sizes = {
        (gender, age): 2200 + 420 * age_idx + (180 if gender == "Male" else 0)
        for age_idx, age in enumerate(_DEMO_AGES)
        for gender in _DEMO_GENDERS
    }
    mi_sizes = {
        (gender, age): 2600 + 300 * age_idx + (120 if gender == "Male" else 0)
        for age_idx, age in enumerate(_DEMO_AGES)
        for gender in _DEMO_GENDERS
    }
    scenario = {
        "seed": 20100,
        "interests": sorted(_DEMO_DEST_SHARES),
        "dest": {
            "label": "Anglos",
            "size": 200_000,
            "traits": {"ethnic_affinity": "Anglo", "home_country": "US"},
            "shares": _DEMO_DEST_SHARES,
        },
        "source": {
            "label": "Mexicans in Mexico",
            "size": 150_000,
            "traits": {"ethnic_affinity": "Hispanic (MX)", "home_country": "MX"},
            "shares": _DEMO_SOURCE_SHARES,
        },
        "expats": [
            {
                "label": "Mexican immigrants",
                "size": 80_000,
                "traits": {
                    "ethnic_affinity": "Hispanic (US - All)",
                    "home_country": "US",
                    "expat_origin": "MX",
                },
                "ar_targets": _DEMO_AR_TARGETS,
            }
        ],
        "extra_subgroups": (
            _demo_cells(
                "Mexican Americans",
                {"ethnic_affinity": "Hispanic (US - All)", "home_country": "US"},
                ma_sizes,
                tilt=0.25,
            )
            + _demo_cells(
                "Mexican immigrant",
                {
                    "ethnic_affinity": "Hispanic (US - All)",
                    "home_country": "US",
                    "expat_origin": "MX",
                },
                mi_sizes,
                tilt=0.15,
            )
        ),
    }
    report.atomic_write_text(out / "scenario.yaml", yaml.safe_dump(scenario, sort_keys=True))

    ma_total = sum(ma_sizes.values())
    truth = {
        "axes": {
            "gender": {
                gender: sum(v for (g, _), v in ma_sizes.items() if g == gender) / ma_total
                for gender in _DEMO_GENDERS
            },
            "age": {
                age: sum(v for (_, a), v in ma_sizes.items() if a == age) / ma_total
                for age in _DEMO_AGES
            },
        }
    }
    report.write_json(out / "pums.json", truth)

    study = {
        "study_id": "demo-study",
        "seed": 1234,
        "out_dir": "out",
        "catalog": {"path": "genres.csv", "floor": 100_000},
        "percentile": 25,
        "bootstrap": 1000,
        "backend": {"kind": "sim", "scenario": "scenario.yaml", "budget": 50_000},
        "axes": {
            "gender": {"categories": list(_DEMO_GENDERS), "reference": "Female"},
            "age": {"categories": list(_DEMO_AGES), "reference": "13-18", "ordinal": True},
        },
        "populations": [
            {"label": "Anglos", "ethnic_affinity": "Anglo", "home_country": "US"},
            {"label": "Mexicans in Mexico", "home_country": "MX"},
            {
                "label": "Mexican immigrants",
                "ethnic_affinity": "Hispanic (US - All)",
                "home_country": "US",
                "expat_origin": "MX",
            },
        ],
        "proxies": {
            "settings": {
                "affinity": "Hispanic (US - All)",
                "destination_country": "US",
                "origin_country": "MX",
                "origin_interest": "Mexico",
                "origin_language": "Spanish",
                "group_name": "Mexican Americans",
            },
            "kinds": ["interest_in_origin"],
        },
        "pairs": [
            {"expat": "Mexican immigrants", "dest": "Anglos", "source": "Mexicans in Mexico"},
            {
                "expat": "Mexican Americans (Mexico)",
                "dest": "Anglos",
                "source": "Mexicans in Mexico",
            },
        ],
        "compare": {
            "groups": [
                {
                    "label": "Mexico gen 1",
                    "expat": "Mexican immigrants",
                    "dest": "Anglos",
                    "source": "Mexicans in Mexico",
                },
                {
                    "label": "Mexico gen 2 (interest)",
                    "expat": "Mexican Americans (Mexico)",
                    "dest": "Anglos",
                    "source": "Mexicans in Mexico",
                },
            ]
        },
        "kde": {"grid_size": 128},
        "validation": {
            "proxies": ["Mexican Americans (Mexico)"],
            "axes": ["gender", "age"],
            "ground_truth": "pums.json",
            "trials": 1000,
        },
        "regression": {
            "family": [
                {"label": "Mexican immigrants (gen 1)", "population": "Mexican immigrants"},
                {
                    "label": "Mexican American (interest)",
                    "population": "Mexican Americans (Mexico)",
                },
            ],
            "reference": "Mexican immigrants (gen 1)",
            "dest": "Anglos",
            "source": "Mexicans in Mexico",
            "axes": ["gender", "age"],
            "interactions": [["age", "gender"], ["age", "generation"]],
            "top_k": 12,
        },
    }
    report.atomic_write_text(out / "study.yaml", yaml.safe_dump(study, sort_keys=True))
    click.echo(f"demo study written to {out}/ (config: {out / 'study.yaml'})")
    click.echo("next: assimlab collect --config " + str(out / "study.yaml"))


if __name__ == "__main__":
    main()
