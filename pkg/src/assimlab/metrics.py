"""Measurement core: interest ratios, the two-step filter, assimilation
ratios, proxy validation, bootstrap intervals, densities, and rankings.

All operations are pure and deterministic given their seeds, so callers
may evaluate different populations in parallel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .catalog import DemographicAxis, InterestCatalog
from .errors import (
    AllZeroError,
    CategoryMismatchError,
    DegenerateCIWarning,
    EmptyResultError,
    ZeroVarianceError,
)

KL_SMOOTHING_EPS = 1e-9


@dataclass(frozen=True, slots=True)
class DemographicProportions:
    """Within-axis category shares of one population.

    ``proportions[c] = count(c) / sum_{c'} count(c')`` over the axis's
    categories.
    """

    axis: DemographicAxis
    proportions: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "proportions", dict(self.proportions))
        total = sum(self.proportions.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"proportions sum to {total}, not 1")
        for c, p in self.proportions.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"proportion {p} for {c!r} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.proportions[c] for c in self.axis.categories], dtype=float)


def demographic_proportions(
    counts: Mapping[str, float], axis: DemographicAxis
) -> DemographicProportions:
    """Share of the population falling into each category of one axis.

    Missing categories are treated as zero counts; categories not on
    the axis are rejected.
    """
    unknown = set(counts) - set(axis.categories)
    if unknown:
        raise CategoryMismatchError(
            f"counts for unknown categories on axis {axis.name!r}: {sorted(unknown)}"
        )
    values = np.array([float(counts.get(c, 0)) for c in axis.categories])
    if (values < 0).any():
        raise ValueError("negative category count")
    total = values.sum()
    if total <= 0:
        raise AllZeroError(f"all counts on axis {axis.name!r} are zero")
    return DemographicProportions(
        axis, dict(zip(axis.categories, (values / total).tolist()))
    )


@dataclass(frozen=True, slots=True)
class InterestRatioVector:
    """Normalized interest shares of one population over a catalog.

    ``ratios[i] = count(p, i) / sum_{i'} count(p, i')`` with interests
    in catalog order; interests without a count have ratio 0.  ``total``
    is the raw declaration total, kept so downstream consumers can
    derive the smallest representable share.
    """

    label: str
    interest_ids: tuple[str, ...]
    ratios: np.ndarray
    total: float

    def __post_init__(self):
        ratios = np.asarray(self.ratios, dtype=float)
        ratios.setflags(write=False)
        object.__setattr__(self, "ratios", ratios)
        if ratios.shape != (len(self.interest_ids),):
            raise ValueError("ratio vector does not match interest ids")
        if abs(ratios.sum() - 1.0) > 1e-9:
            raise ValueError(f"ratios sum to {ratios.sum()}, not 1")

    def ratio(self, interest_id: str) -> float:
        return float(self.ratios[self.interest_ids.index(interest_id)])

    def as_mapping(self) -> dict[str, float]:
        return dict(zip(self.interest_ids, self.ratios.tolist()))


def interest_ratios(
    counts: Mapping[str, float], catalog: InterestCatalog, label: str = ""
) -> InterestRatioVector:
    """Interest-ratio vector of a population over the full catalog.

    Example: counts of 10 for hip-hop, 60 for rock, and 30 for rap give
    a hip-hop ratio of 10/100 = 0.10.
    """
    unknown = set(counts) - set(catalog.ids)
    if unknown:
        raise ValueError(f"counts for interests outside the catalog: {sorted(unknown)}")
    values = np.array([float(counts.get(i, 0)) for i in catalog.ids])
    if (values < 0).any():
        raise ValueError("negative interest count")
    total = values.sum()
    if total <= 0:
        raise AllZeroError(f"population {label!r} has no interest declarations")
    return InterestRatioVector(label, catalog.ids, values / total, float(total))


def _check_same_catalog(a: InterestRatioVector, b: InterestRatioVector):
    if a.interest_ids != b.interest_ids:
        raise CategoryMismatchError("ratio vectors are over different catalogs")


@dataclass(frozen=True, slots=True)
class FilterReport:
    """Outcome of the two-step destination-distinct interest filter."""

    kept: tuple[str, ...]
    removed_step1: tuple[str, ...]
    removed_step2: tuple[str, ...]
    deltas: Mapping[str, float]
    percentile: float
    threshold: float
    delta_base: str
    dest_label: str = ""
    source_label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "deltas", dict(self.deltas))
        universe = set(self.kept) | set(self.removed_step1) | set(self.removed_step2)
        if len(universe) != len(self.kept) + len(self.removed_step1) + len(self.removed_step2):
            raise ValueError("filter partitions overlap")


def filter_interests(
    i_dest: InterestRatioVector,
    i_source: InterestRatioVector,
    p: float = 50.0,
    delta_base: str = "survivors",
) -> FilterReport:
    """Select interests distinctly more associated with the destination.

    Step 1 removes every interest whose destination ratio is strictly
    below its source ratio.  Step 2 computes the difference
    ``delta = dest - source`` and removes survivors whose delta falls at
    or below the p-th percentile (linear interpolation between order
    statistics).  ``delta_base`` controls whether the percentile is
    taken over step-1 survivors (default) or over the whole catalog.
    """
    _check_same_catalog(i_dest, i_source)
    if not 0.0 <= p <= 100.0:
        raise ValueError("percentile must be in [0, 100]")
    if delta_base not in ("survivors", "all"):
        raise ValueError("delta_base must be 'survivors' or 'all'")

    ids = i_dest.interest_ids
    delta = i_dest.ratios - i_source.ratios
    deltas = dict(zip(ids, delta.tolist()))
    survivor_mask = i_dest.ratios >= i_source.ratios
    removed_step1 = tuple(i for i, keep in zip(ids, survivor_mask) if not keep)
    survivors = [i for i, keep in zip(ids, survivor_mask) if keep]
    if not survivors:
        raise EmptyResultError("step 1 removed every interest")

    base = delta[survivor_mask] if delta_base == "survivors" else delta
    threshold = float(np.percentile(base, p, method="linear"))
    kept = tuple(i for i in survivors if deltas[i] > threshold)
    removed_step2 = tuple(i for i in survivors if deltas[i] <= threshold)
    if not kept:
        raise EmptyResultError(
            f"no interest above the {p}th-percentile threshold {threshold}"
        )
    return FilterReport(
        kept=kept,
        removed_step1=removed_step1,
        removed_step2=removed_step2,
        deltas=deltas,
        percentile=p,
        threshold=threshold,
        delta_base=delta_base,
        dest_label=i_dest.label,
        source_label=i_source.label,
    )


@dataclass(frozen=True, slots=True)
class AssimilationReport:
    """Per-interest assimilation ratios over the filtered interest set.

    ``ar[i] = I_expat,i / I_dest,i``; a value of 1 (log 0) means the
    expat population matches the destination population's interest
    share for that genre.
    """

    expat_label: str
    dest_label: str
    source_label: str
    interest_ids: tuple[str, ...]
    ar: np.ndarray
    log_ar: np.ndarray
    flagged: tuple[str, ...]
    epsilon: float
    median_log_ar: float
    filter: FilterReport
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None

    def __post_init__(self):
        for name in ("ar", "log_ar"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if (self.ar <= 0).any():
            raise ValueError("assimilation ratios must be positive")
        if self.ci_low is not None and self.ci_high is not None:
            if not self.ci_low <= self.median_log_ar <= self.ci_high:
                raise ValueError("median outside its confidence interval")

    def with_ci(self, ci: "BootstrapCI") -> "AssimilationReport":
        return replace(self, ci_low=ci.low, ci_high=ci.high)


def assimilation_ratios(
    i_expat: InterestRatioVector,
    i_dest: InterestRatioVector,
    filter_report: FilterReport,
    epsilon: Optional[float] = None,
) -> AssimilationReport:
    """Assimilation ratios of an expat population over the filtered set.

    Kept interests with a zero expat share get a floor ``epsilon``
    substituted (default: half the smallest representable share for the
    expat population) and are flagged; dropping them instead would bias
    the median upward.
    """
    _check_same_catalog(i_expat, i_dest)
    expat = i_expat.as_mapping()
    dest = i_dest.as_mapping()
    if epsilon is None:
        if i_expat.total > 0:
            epsilon = 0.5 / i_expat.total
        else:
            positive = i_expat.ratios[i_expat.ratios > 0]
            epsilon = 0.5 * float(positive.min()) if positive.size else 1e-12
    ar = []
    flagged = []
    for interest in filter_report.kept:
        d = dest[interest]
        if d <= 0:
            raise ValueError(
                f"kept interest {interest!r} has zero destination share"
            )
        e = expat[interest]
        if e <= 0:
            e = epsilon
            flagged.append(interest)
        ar.append(e / d)
    ar_arr = np.array(ar)
    log_ar = np.log(ar_arr)
    return AssimilationReport(
        expat_label=i_expat.label,
        dest_label=i_dest.label,
        source_label=filter_report.source_label,
        interest_ids=tuple(filter_report.kept),
        ar=ar_arr,
        log_ar=log_ar,
        flagged=tuple(flagged),
        epsilon=float(epsilon),
        median_log_ar=float(np.median(log_ar)),
        filter=filter_report,
    )


@dataclass(frozen=True, slots=True)
class BootstrapCI:
    median: float
    low: float
    high: float
    n_values: int
    n_boot: int
    seed: int


def median_ar_ci(
    report_or_values: AssimilationReport | Sequence[float],
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 95.0,
) -> BootstrapCI:
    """Percentile-bootstrap confidence interval for the median log AR.

    Resamples the per-interest log ratios with replacement ``n_boot``
    times via ``rng.integers(0, n, size=(n_boot, n))``, takes the median
    of each resample, and reports the (100-level)/2 and (100+level)/2
    percentiles.  Deterministic given the seed.
    """
    if isinstance(report_or_values, AssimilationReport):
        values = np.asarray(report_or_values.log_ar, dtype=float)
    else:
        values = np.asarray(report_or_values, dtype=float)
    if values.size < 1:
        raise ValueError("need at least one value")
    if n_boot < 1:
        raise ValueError("need at least one bootstrap replicate")
    if values.size < 5:
        warnings.warn(
            f"bootstrap CI over only {values.size} values is unreliable",
            DegenerateCIWarning,
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    medians = np.median(values[idx], axis=1)
    half = (100.0 - level) / 2.0
    low, high = np.percentile(medians, [half, 100.0 - half], method="linear")
    return BootstrapCI(
        median=float(np.median(values)),
        low=float(low),
        high=float(high),
        n_values=int(values.size),
        n_boot=int(n_boot),
        seed=int(seed),
    )


def _smoothed(p: np.ndarray, eps: float) -> np.ndarray:
    q = p + eps
    return q / q.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_SMOOTHING_EPS) -> float:
    """KL(p || q) in nats with epsilon smoothing on both arguments."""
    p = _smoothed(np.asarray(p, dtype=float), eps)
    q = _smoothed(np.asarray(q, dtype=float), eps)
    return float(np.sum(p * np.log(p / q)))


@dataclass(frozen=True, slots=True)
class ProxyValidation:
    """Observed proxy KL against a uniform-simplex chance baseline."""

    observed_kl: float
    per_axis_kl: Mapping[str, float]
    baseline_mean: float
    baseline_percentiles: Mapping[str, float]
    baseline_quantile: float
    n_trials: int
    seed: int
    alpha: float
    significantly_lower: bool
    smoothed_axes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_axis_kl", dict(self.per_axis_kl))
        object.__setattr__(self, "baseline_percentiles", dict(self.baseline_percentiles))


def validate_proxy(
    estimated: Sequence[DemographicProportions],
    ground_truth: Sequence[DemographicProportions],
    n_trials: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
) -> ProxyValidation:
    """Compare a proxy population's demographics against ground truth.

    The observed statistic is KL(estimated || ground_truth) summed over
    axes.  The chance baseline redraws the estimated distribution of
    each axis from the uniform distribution on its simplex (symmetric
    Dirichlet with unit concentration) ``n_trials`` times; the proxy
    passes when the observed KL sits below the ``alpha`` quantile of
    the baseline.
    """
    if n_trials < 1:
        raise ValueError("need at least one baseline trial")
    if len(estimated) != len(ground_truth) or not estimated:
        raise CategoryMismatchError("estimated and ground-truth axis lists differ")
    rng = np.random.default_rng(seed)
    per_axis: dict[str, float] = {}
    smoothed_axes = []
    baseline = np.zeros(n_trials)
    for est, truth in zip(estimated, ground_truth):
        if est.axis.name != truth.axis.name or est.axis.categories != truth.axis.categories:
            raise CategoryMismatchError(
                f"axis mismatch: {est.axis.name!r} vs {truth.axis.name!r}"
            )
        e = est.as_array()
        t = truth.as_array()
        if (e == 0).any() or (t == 0).any():
            smoothed_axes.append(est.axis.name)
        per_axis[est.axis.name] = kl_divergence(e, t)
        draws = rng.dirichlet(np.ones(len(e)), size=n_trials)
        t_s = _smoothed(t, KL_SMOOTHING_EPS)
        d_s = draws + KL_SMOOTHING_EPS
        d_s /= d_s.sum(axis=1, keepdims=True)
        baseline += np.sum(d_s * np.log(d_s / t_s), axis=1)
    observed = float(sum(per_axis.values()))
    quantile = float(np.mean(baseline < observed))
    p05, p50, p95 = np.percentile(baseline, [5, 50, 95], method="linear")
    return ProxyValidation(
        observed_kl=observed,
        per_axis_kl=per_axis,
        baseline_mean=float(baseline.mean()),
        baseline_percentiles={"p05": float(p05), "p50": float(p50), "p95": float(p95)},
        baseline_quantile=quantile,
        n_trials=n_trials,
        seed=int(seed),
        alpha=alpha,
        significantly_lower=quantile <= alpha,
        smoothed_axes=tuple(smoothed_axes),
    )


@dataclass(frozen=True, slots=True)
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def __post_init__(self):
        for name in ("grid", "density"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def trapezoid_mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def silverman_bandwidth(values: np.ndarray) -> float:
    """Silverman's rule of thumb: 0.9 * min(std, IQR/1.34) * n^(-1/5)."""
    std = float(np.std(values))
    q75, q25 = np.percentile(values, [75, 25])
    iqr = float(q75 - q25)
    scale = min(std, iqr / 1.34) if iqr > 0 else std
    return 0.9 * scale * len(values) ** (-0.2)


def kde_density(
    values: Sequence[float],
    bandwidth: float | str = "silverman",
    grid_size: int = 512,
    cut: float = 5.0,
) -> DensityCurve:
    """Gaussian kernel density of a score sample on an even grid.

    The grid extends ``cut`` bandwidths beyond the data range so the
    curve integrates to 1 within trapezoid error.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values")
    if np.ptp(x) == 0:
        raise ZeroVarianceError("all values identical; bandwidth would be zero")
    if bandwidth == "silverman":
        h = silverman_bandwidth(x)
    else:
        h = float(bandwidth)
        if h <= 0:
            raise ValueError("bandwidth must be positive")
    grid = np.linspace(x.min() - cut * h, x.max() + cut * h, int(grid_size))
    z = (grid[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * np.sqrt(2 * np.pi))
    return DensityCurve(grid=grid, density=density, bandwidth=h)


def top_k_interests(vector: InterestRatioVector, k: int) -> list[tuple[str, float]]:
    """Interests ranked by ratio, descending, ties broken by id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(
        zip(vector.interest_ids, vector.ratios.tolist()),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]
