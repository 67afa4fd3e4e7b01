"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as
they print.
"""

import csv
import dataclasses
import functools
import itertools
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from assimlab import cli
from assimlab.audience import AudienceQuery, ManualClock, Snapshot, SnapshotBackend, fetch_snapshot, plan_queries
from assimlab.catalog import DemographicAxis, PopulationSpec, build_catalog
from assimlab.errors import EmptyResultError
from assimlab.metrics import (
    assimilation_ratios,
    demographic_proportions,
    filter_interests,
    interest_ratios,
    median_ar_ci,
    validate_proxy,
)
from assimlab.simulator import (
    SimBackend,
    bloc_spec,
    generate_world,
    oracle_assimilation,
    random_planted_scenario,
)
from assimlab.stats import CategoricalAxis, encode_design, kruskal_wallis, midranks, ols_fit

from conftest import write_mini_study


def criterion(number, description):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[criterion {number:2d}] FAIL  {description}")
                raise
            print(f"\n[criterion {number:2d}] PASS  {description}")

        return wrapper

    return decorate


def run_ok(*args):
    result = CliRunner().invoke(cli.main, [str(a) for a in args])
    assert result.exit_code == 0, result.output
    return result


# -------------------------------------------------------------------------


@criterion(1, "worked example: counts {10, 60, 30} give hip-hop ratio exactly 0.10")
def test_criterion_1_worked_example():
    catalog = build_catalog(
        [("hip-hop", 1_000_000), ("rock", 1_000_000), ("rap", 1_000_000)], floor=0
    )
    vec = interest_ratios({"hip-hop": 10, "rock": 60, "rap": 30}, catalog)
    assert vec.ratio("hip-hop") == 0.10


# -------------------------------------------------------------------------


def _hand_percentile(values, p):
    data = sorted(values)
    if len(data) == 1:
        return data[0]
    pos = (len(data) - 1) * p / 100.0
    lo, hi = math.floor(pos), math.ceil(pos)
    if lo == hi:
        return data[lo]
    return data[lo] * (hi - pos) + data[hi] * (pos - lo)


def _brute_force_filter(dest, source, p):
    ids = sorted(dest)
    removed1 = {i for i in ids if dest[i] < source[i]}
    survivors = [i for i in ids if i not in removed1]
    if not survivors:
        return None
    deltas = {i: dest[i] - source[i] for i in survivors}
    threshold = _hand_percentile(list(deltas.values()), p)
    kept = {i for i in survivors if deltas[i] > threshold}
    if not kept:
        return None
    removed2 = {i for i in survivors if deltas[i] <= threshold}
    return kept, removed1, removed2


@criterion(2, "filter equals brute-force enumeration on 1,000 random instances")
def test_criterion_2_filter_oracle_equivalence():
    rng = np.random.default_rng(8128)
    agree = 0
    for _ in range(1000):
        n = int(rng.integers(2, 11))
        catalog = build_catalog([(f"i{j}", 10) for j in range(n)], floor=0)
        dest_counts = {f"i{j}": int(c) for j, c in enumerate(rng.integers(1, 1000, n))}
        source_counts = {f"i{j}": int(c) for j, c in enumerate(rng.integers(1, 1000, n))}
        p = float(rng.uniform(0, 100))
        dest = interest_ratios(dest_counts, catalog)
        source = interest_ratios(source_counts, catalog)
        expected = _brute_force_filter(dest.as_mapping(), source.as_mapping(), p)
        if expected is None:
            with pytest.raises(EmptyResultError):
                filter_interests(dest, source, p=p)
            agree += 1
            continue
        kept, removed1, removed2 = expected
        rep = filter_interests(dest, source, p=p)
        assert set(rep.kept) == kept
        assert set(rep.removed_step1) == removed1
        assert set(rep.removed_step2) == removed2
        agree += 1
    assert agree == 1000


# -------------------------------------------------------------------------


def _pipeline_report(world, scenario, catalog, p=50.0):
    backend = SimBackend(world)

    def counts(spec):
        return {i: backend.count(AudienceQuery(spec, i))[0] for i in catalog.ids}

    vec_e = interest_ratios(counts(bloc_spec(scenario.expats[0])), catalog, "expat")
    vec_d = interest_ratios(counts(bloc_spec(scenario.dest)), catalog, "dest")
    vec_s = interest_ratios(counts(bloc_spec(scenario.source)), catalog, "source")
    filt = filter_interests(vec_d, vec_s, p=p)
    return assimilation_ratios(vec_e, vec_d, filt)


@criterion(3, "planted AR recovered (exact unrounded; rounded median within 0.1 in >=95%)")
def test_criterion_3_planted_ar_recovery():
    rng = np.random.default_rng(2026)
    rounded_hits = 0
    scenarios = 20
    for k in range(scenarios):
        n = int(rng.integers(3, 51))
        scenario = random_planted_scenario(seed=300 + k, n_interests=n)
        targets = scenario.expats[0].ar_targets
        catalog = build_catalog([(i, 10) for i in scenario.interests], floor=0)

        world = generate_world(scenario, seed=300 + k)
        rep = _pipeline_report(world, scenario, catalog)
        for j, interest in enumerate(rep.interest_ids):
            assert abs(rep.ar[j] - targets[interest]) <= 1e-12 * targets[interest]

        oracle = oracle_assimilation(
            world,
            bloc_spec(scenario.expats[0]),
            bloc_spec(scenario.dest),
            bloc_spec(scenario.source),
            catalog,
            p=50,
        )
        planted_median = float(np.median([math.log(targets[i]) for i in oracle]))

        rounded = generate_world(dataclasses.replace(scenario, rounding=2), seed=300 + k)
        rep_rounded = _pipeline_report(rounded, scenario, catalog)
        rounded_hits += abs(rep_rounded.median_log_ar - planted_median) <= 0.1
    assert rounded_hits >= 0.95 * scenarios


# -------------------------------------------------------------------------


@criterion(4, "observed KL below 5th pct of N=1000 uniform baseline in >=95% of 100 reps")
def test_criterion_4_kl_validation_pattern():
    age = DemographicAxis("age", ("13-18", "19-28", "29-38", "39-48", "49-65"))
    edu = DemographicAxis(
        "education", ("lt-hs", "hs", "some-college", "college")
    )
    gender = DemographicAxis("gender", ("Female", "Male"))
    truth = [
        demographic_proportions(
            {"13-18": 14, "19-28": 30, "29-38": 26, "39-48": 18, "49-65": 12}, age
        ),
        demographic_proportions(
            {"lt-hs": 22, "hs": 34, "some-college": 26, "college": 18}, edu
        ),
        demographic_proportions({"Female": 51, "Male": 49}, gender),
    ]
    estimated = [
        demographic_proportions(
            {"13-18": 11, "19-28": 33, "29-38": 28, "39-48": 17, "49-65": 11}, age
        ),
        demographic_proportions(
            {"lt-hs": 26, "hs": 31, "some-college": 25, "college": 18}, edu
        ),
        demographic_proportions({"Female": 54, "Male": 46}, gender),
    ]
    passes = 0
    for seed in range(100):
        outcome = validate_proxy(estimated, truth, n_trials=1000, seed=seed)
        assert outcome.observed_kl < outcome.baseline_mean
        passes += outcome.baseline_quantile <= 0.05
    assert passes >= 95


# -------------------------------------------------------------------------


def _partitions(n, largest=None):
    """Integer partitions of n, parts descending."""
    largest = largest or n
    if n == 0:
        yield ()
        return
    for part in range(min(n, largest), 0, -1):
        for rest in _partitions(n - part, part):
            yield (part,) + rest


def _permutation_oracle(groups):
    """Pure-python exhaustive permutation p for the Kruskal statistic."""
    sizes = [len(g) for g in groups]
    pooled = [v for g in groups for v in g]
    ranks = midranks(np.array(pooled, dtype=float)).tolist()
    n = len(pooled)

    def h_of(seq):
        h = 0.0
        start = 0
        for size in sizes:
            total = 0.0
            for v in seq[start : start + size]:
                total += v
            h += total * total / size
            start += size
        return 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)

    h_obs = h_of(ranks)
    hits = 0
    count = 0
    for perm in itertools.permutations(ranks):
        count += 1
        hits += h_of(perm) >= h_obs - 1e-12
    return h_obs, hits / count


@criterion(5, "Kruskal H matches hand formula; p within 0.02 of exhaustive permutation p")
def test_criterion_5_kruskal_oracle():
    rng = np.random.default_rng(555)
    checked = 0
    for n in range(3, 9):
        for sizes in _partitions(n):
            k = len(sizes)
            if k < 2 or n < k + 1:
                continue
            values = (rng.permutation(n) + 1).astype(float).tolist()
            groups = {}
            start = 0
            for g, size in enumerate(sizes):
                groups[f"g{g}"] = values[start : start + size]
                start += size

            h, p = kruskal_wallis(groups)

            # hand formula, exact rational arithmetic (tie-free data)
            pooled = sorted(values)
            rank_of = {v: r + 1 for r, v in enumerate(pooled)}
            total = sum(
                Fraction(sum(rank_of[v] for v in g)) ** 2 * Fraction(1, len(g))
                for g in groups.values()
            )
            h_hand = float(Fraction(12, n * (n + 1)) * total - 3 * (n + 1))
            assert abs(h - h_hand) <= 1e-12 * max(1.0, abs(h_hand))

            _, p_oracle = _permutation_oracle(list(groups.values()))
            assert abs(p - p_oracle) <= 0.02
            checked += 1
    assert checked >= 40  # every admissible size partition up to n=8


# -------------------------------------------------------------------------


@criterion(6, "OLS recovers planted effects within 3 SE in >=95% of 100 runs")
def test_criterion_6_ols_recovery():
    gender = CategoricalAxis("gender", ("F", "M"), "F")
    age = CategoricalAxis("age", ("13-18", "19-28", "39-48"), "13-18")
    lang = CategoricalAxis("language", ("Bilingual", "English", "Spanish"), "Bilingual")
    planted = {
        "Intercept": -0.79,
        "M": -0.27,
        "19-28": 1.17,
        "39-48": 0.88,
        "English": 0.46,
        "Spanish": -1.05,
    }
    hits = 0
    runs = 100
    for run in range(runs):
        rng = np.random.default_rng([606, run])
        rows = []
        y = []
        for _ in range(400):
            row = {
                "gender": str(rng.choice(gender.categories)),
                "age": str(rng.choice(age.categories)),
                "language": str(rng.choice(lang.categories)),
            }
            mean = planted["Intercept"]
            for name in ("M", "19-28", "39-48", "English", "Spanish"):
                if name in row.values():
                    mean += planted[name]
            rows.append(row)
            y.append(mean + rng.normal(scale=0.1))
        design = encode_design(rows, y, [gender, age, lang])
        fit = ols_fit(design)

        ok = all(
            abs(fit.coefficient(name) - value)
            <= 3 * fit.stderr[fit.column_names.index(name)]
            for name, value in planted.items()
        )
        hits += ok

        resid = np.asarray(y) - fit.predict(design.x)
        for j in range(design.x.shape[1]):
            col = design.x[:, j]
            assert abs(float(resid @ (col / np.linalg.norm(col)))) < 1e-8

        swapped_axis = CategoricalAxis("gender", ("F", "M"), "M")
        fit_swapped = ols_fit(encode_design(rows, y, [swapped_axis, age, lang]))
        design_swapped = encode_design(rows, y, [swapped_axis, age, lang])
        assert np.allclose(
            fit.predict(design.x), fit_swapped.predict(design_swapped.x), atol=1e-10
        )
    assert hits >= 0.95 * runs


# -------------------------------------------------------------------------


@criterion(7, "regress output matches the frozen table layout (golden file)")
def test_criterion_7_table_structure(tmp_path):
    demo = tmp_path / "demo"
    run_ok("sim", "init", "--out", demo)
    run_ok("collect", "--config", demo / "study.yaml")
    run_ok("regress", "--config", demo / "study.yaml")
    produced = (demo / "out" / "regression_main.txt").read_text(encoding="utf-8")
    expected = (Path(__file__).parent / "golden" / "regression_main.txt").read_text(
        encoding="utf-8"
    )
    assert produced == expected
    assert "β (S.E.)" in produced
    assert "***" in produced
    assert produced.rstrip().splitlines()[-1].startswith("N=")


# -------------------------------------------------------------------------


@criterion(8, "snapshot fetch -> write -> read -> re-serve is value- and byte-stable")
def test_criterion_8_snapshot_roundtrip(tmp_path):
    scenario = random_planted_scenario(seed=88, n_interests=6, scale=500)
    world = generate_world(scenario, seed=88)
    catalog = build_catalog([(i, 10) for i in scenario.interests], floor=0)
    specs = [bloc_spec(scenario.dest), bloc_spec(scenario.source), bloc_spec(scenario.expats[0])]
    plan = plan_queries(specs, catalog)

    path = tmp_path / "snap.ndjson"
    fetched = fetch_snapshot(SimBackend(world), plan, clock=ManualClock(), study_id="s", path=path)
    loaded = Snapshot.read(path)
    assert loaded.count_map() == fetched.count_map()

    rewritten = tmp_path / "rewrite.ndjson"
    loaded.write(rewritten)
    assert rewritten.read_bytes() == path.read_bytes()

    served = SnapshotBackend(loaded)
    for query in plan.queries:
        assert served.count(query) == world.count_query(query.spec, query.interest)


# -------------------------------------------------------------------------


@criterion(9, "pipeline rerun with the same root seed is byte-identical")
def test_criterion_9_determinism(tmp_path):
    demo = tmp_path / "demo"
    run_ok("sim", "init", "--out", demo)
    config = demo / "study.yaml"
    for out in ("o1", "o2"):
        for command in ("collect", "ar", "compare", "kde", "regress", "validate"):
            run_ok(command, "--config", config, "--out", demo / out)
    first = demo / "o1"
    second = demo / "o2"
    names = sorted(p.name for p in first.iterdir() if p.name != "run_meta.json")
    assert "snapshot.ndjson" in names and any(n.startswith("regression") for n in names)
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


# -------------------------------------------------------------------------


@criterion(10, "compare separates high/low assimilation blocs with disjoint 95% CIs")
def test_criterion_10_cross_country_harness(tmp_path):
    study = write_mini_study(tmp_path)
    # replace the single-expat scenario with a high and a low bloc over 12 genres
    genres = [f"genre-{chr(ord('a') + i)}" for i in range(12)]
    dest_shares = dict(zip(genres, (0.13, 0.11, 0.07, 0.12, 0.13, 0.11, 0.08, 0.10, 0.03, 0.03, 0.03, 0.06)))
    source_shares = dict(zip(genres, (0.03, 0.09, 0.08, 0.01, 0.09, 0.02, 0.02, 0.03, 0.07, 0.22, 0.18, 0.16)))
    anglo_leaning = [g for g in genres if dest_shares[g] >= source_shares[g]]
    high_targets = {g: t for g, t in zip(anglo_leaning, itertools.cycle((0.95, 1.0, 1.05)))}
    low_targets = {g: t for g, t in zip(anglo_leaning, itertools.cycle((0.40, 0.45, 0.50)))}
    scenario = {
        "seed": 10,
        "interests": genres,
        "dest": {"label": "dest", "size": 100_000,
                 "traits": {"ethnic_affinity": "D", "home_country": "DST"},
                 "shares": dest_shares},
        "source": {"label": "source", "size": 100_000,
                   "traits": {"home_country": "SRC"},
                   "shares": source_shares},
        "expats": [
            {"label": "high bloc", "size": 50_000,
             "traits": {"ethnic_affinity": "HI", "home_country": "DST", "expat_origin": "SRC"},
             "ar_targets": high_targets},
            {"label": "low bloc", "size": 50_000,
             "traits": {"ethnic_affinity": "LO", "home_country": "DST", "expat_origin": "SRC"},
             "ar_targets": low_targets},
        ],
    }
    (tmp_path / "genres.csv").write_text(
        "name,worldwide_audience\n" + "\n".join(f"{g},500000" for g in genres) + "\n"
    )
    (tmp_path / "scenario.yaml").write_text(yaml.safe_dump(scenario))
    (tmp_path / "study.yaml").write_text(
        yaml.safe_dump(
            {
                "study_id": "blocs",
                "seed": 17,
                "out_dir": "out",
                "catalog": {"path": "genres.csv", "floor": 0},
                "percentile": 25,
                "bootstrap": 2000,
                "backend": {"kind": "sim", "scenario": "scenario.yaml"},
                "populations": [
                    {"label": "high bloc", "ethnic_affinity": "HI",
                     "home_country": "DST", "expat_origin": "SRC"},
                    {"label": "low bloc", "ethnic_affinity": "LO",
                     "home_country": "DST", "expat_origin": "SRC"},
                    {"label": "dest", "ethnic_affinity": "D", "home_country": "DST"},
                    {"label": "source", "home_country": "SRC"},
                ],
                "compare": {
                    "groups": [
                        {"label": "high", "expat": "high bloc", "dest": "dest", "source": "source"},
                        {"label": "low", "expat": "low bloc", "dest": "dest", "source": "source"},
                    ]
                },
            }
        )
    )
    run_ok("collect", "--config", tmp_path / "study.yaml")
    run_ok("compare", "--config", tmp_path / "study.yaml")
    with open(tmp_path / "out" / "compare.csv", newline="", encoding="utf-8") as handle:
        rows = {
            r["group"]: r
            for r in csv.DictReader(l for l in handle if not l.startswith("#"))
        }
    high, low = rows["high"], rows["low"]
    assert float(high["median_log_ar"]) > float(low["median_log_ar"])
    assert float(low["ci_high"]) < float(high["ci_low"])  # disjoint 95% CIs
