"""Group-difference tests and regression on assimilation scores.

Kruskal-Wallis uses midranks with the standard tie correction; the
regression encodes every demographic axis as categorical dummies
against a reference level, with optional pairwise interactions, and
solves least squares by QR rather than normal equations.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats as sps

from .errors import InsufficientDataError, RankDeficiencyWarning, RankDeficientError


@dataclass(frozen=True, slots=True)
class GroupedScores:
    """Log assimilation scores keyed by group label."""

    groups: Mapping[str, Sequence[float]]

    def __post_init__(self):
        groups = {k: np.asarray(v, dtype=float) for k, v in self.groups.items()}
        object.__setattr__(self, "groups", groups)
        if len(groups) < 2:
            raise InsufficientDataError("need at least two groups")
        for label, values in groups.items():
            if values.size < 1:
                raise InsufficientDataError(f"group {label!r} is empty")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.groups)

    @property
    def total(self) -> int:
        return int(sum(v.size for v in self.groups.values()))


def midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values assigned the mean of their ranks."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


#: Largest pooled sample for which the exact permutation p is computed
#: by default; the chi-square tail is a poor approximation below this.
EXACT_P_MAX_N = 9


def _h_statistic(ranks: np.ndarray, sizes: Sequence[int], divisor: float) -> float:
    n = ranks.size
    h = 0.0
    start = 0
    for size in sizes:
        h += ranks[start : start + size].sum() ** 2 / size
        start += size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    return max(h / divisor, 0.0)


def _exact_permutation_p(ranks: np.ndarray, sizes: Sequence[int], divisor: float, h_obs: float) -> float:
    """P(H >= observed) over all orderings of the pooled ranks."""
    n = ranks.size
    perms = np.array(list(itertools.permutations(ranks.tolist())))
    total = 0.0
    start = 0
    for size in sizes:
        total += perms[:, start : start + size].sum(axis=1) ** 2 / size
        start += size
    h_all = np.maximum((12.0 / (n * (n + 1)) * total - 3.0 * (n + 1)) / divisor, 0.0)
    return float(np.mean(h_all >= h_obs - 1e-12))


def kruskal_wallis(
    grouped: GroupedScores | Mapping[str, Sequence[float]],
    method: str = "auto",
) -> tuple[float, float]:
    """Kruskal-Wallis H on midranks with tie correction.

    The p-value comes from the chi-square distribution with k-1 degrees
    of freedom, except for small pooled samples (n <= 9 under the
    default "auto" method) where the exact permutation distribution is
    enumerated instead: the chi-square tail misstates tiny-sample p by
    far more than it is trusted for.  When every observation is tied,
    the correction divisor vanishes and H is defined as 0.
    """
    if method not in ("auto", "chi2", "exact"):
        raise ValueError("method must be auto, chi2, or exact")
    if not isinstance(grouped, GroupedScores):
        grouped = GroupedScores(grouped)
    k = len(grouped.labels)
    n = grouped.total
    if n < k + 1:
        raise InsufficientDataError(
            f"{n} observations cannot support a {k}-group test"
        )
    pooled = np.concatenate([grouped.groups[g] for g in grouped.labels])
    sizes = [grouped.groups[g].size for g in grouped.labels]
    ranks = midranks(pooled)

    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts))
    divisor = 1.0 - tie_term / (n**3 - n)
    if divisor <= 0:
        return 0.0, 1.0
    h = _h_statistic(ranks, sizes, divisor)
    exact = method == "exact" or (method == "auto" and n <= EXACT_P_MAX_N)
    if exact:
        p = _exact_permutation_p(ranks, sizes, divisor, h)
    else:
        p = float(sps.chi2.sf(h, k - 1))
    return float(h), p


@dataclass(frozen=True, slots=True)
class CategoricalAxis:
    """An axis as the design encoder sees it: categories plus the
    reference level that gets no dummy column."""

    name: str
    categories: tuple[str, ...]
    reference: str

    def __post_init__(self):
        if self.reference not in self.categories:
            raise ValueError(
                f"reference {self.reference!r} not among categories of {self.name!r}"
            )
        if len(set(self.categories)) != len(self.categories):
            raise ValueError(f"duplicate categories on {self.name!r}")

    @property
    def dummies(self) -> tuple[str, ...]:
        return tuple(c for c in self.categories if c != self.reference)


@dataclass(frozen=True, slots=True)
class Column:
    """One design-matrix column with enough metadata to render tables."""

    name: str
    kind: str  # intercept | dummy | interaction
    axis: Optional[str] = None
    category: Optional[str] = None
    parents: tuple[str, ...] = ()


@dataclass(frozen=True, slots=True)
class DesignMatrix:
    columns: tuple[Column, ...]
    x: np.ndarray
    y: np.ndarray
    axes: tuple[CategoricalAxis, ...]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.shape != (y.size, len(self.columns)):
            raise ValueError("design shape mismatch")

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)


def encode_design(
    rows: Sequence[Mapping[str, str]],
    responses: Sequence[float],
    axes: Sequence[CategoricalAxis],
    interactions: Sequence[tuple[str, str]] = (),
) -> DesignMatrix:
    """Dummy-encode categorical observations into a regression design.

    Every axis contributes one 0/1 column per non-reference category;
    a row in all reference categories is represented by the intercept
    alone.  Interaction columns are elementwise products of the two
    constituent dummies, named "<cat_a> * <cat_b>".  Axes stay
    categorical even when ordinal so nonlinear effects are free.
    """
    if len(rows) != len(responses):
        raise ValueError("rows and responses differ in length")
    if not rows:
        raise InsufficientDataError("no observations")
    axis_by_name = {a.name: a for a in axes}
    if len(axis_by_name) != len(axes):
        raise ValueError("duplicate axis names")
    for pair in interactions:
        for name in pair:
            if name not in axis_by_name:
                raise ValueError(f"interaction references unknown axis {name!r}")

    columns: list[Column] = [Column("Intercept", "intercept")]
    blocks: list[np.ndarray] = [np.ones((len(rows), 1))]

    axis_dummies: dict[tuple[str, str], np.ndarray] = {}
    for axis in axes:
        for row_idx, row in enumerate(rows):
            category = row.get(axis.name)
            if category is None:
                raise ValueError(f"row {row_idx} has no category for axis {axis.name!r}")
            if category not in axis.categories:
                raise ValueError(
                    f"unknown category {category!r} for axis {axis.name!r}"
                )
        for category in axis.dummies:
            col = np.array(
                [1.0 if row[axis.name] == category else 0.0 for row in rows]
            )
            axis_dummies[(axis.name, category)] = col
            columns.append(Column(category, "dummy", axis=axis.name, category=category))
            blocks.append(col[:, None])

    for axis_a, axis_b in interactions:
        for cat_a in axis_by_name[axis_a].dummies:
            for cat_b in axis_by_name[axis_b].dummies:
                col = axis_dummies[(axis_a, cat_a)] * axis_dummies[(axis_b, cat_b)]
                columns.append(
                    Column(
                        f"{cat_a} * {cat_b}",
                        "interaction",
                        axis=f"{axis_a} x {axis_b}",
                        parents=(cat_a, cat_b),
                    )
                )
                blocks.append(col[:, None])

    x = np.hstack(blocks)
    for idx, column in enumerate(columns):
        if column.kind != "intercept" and np.ptp(x[:, idx]) == 0:
            warnings.warn(
                f"design column {column.name!r} is constant",
                RankDeficiencyWarning,
                stacklevel=2,
            )
    return DesignMatrix(
        columns=tuple(columns),
        x=x,
        y=np.asarray(responses, dtype=float),
        axes=tuple(axes),
    )


@dataclass(frozen=True, slots=True)
class RegressionFit:
    """OLS fit with classical standard errors and an intercept-only F test."""

    columns: tuple[Column, ...]
    beta: np.ndarray
    stderr: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    n_obs: int
    r_squared: float
    f_statistic: float
    f_p_value: float
    dropped_columns: tuple[str, ...] = ()
    axes: tuple[CategoricalAxis, ...] = ()

    def __post_init__(self):
        for name in ("beta", "stderr", "t_values", "p_values"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not 0.0 <= self.r_squared <= 1.0 + 1e-12:
            raise ValueError(f"R^2 out of range: {self.r_squared}")

    def coefficient(self, name: str) -> float:
        return float(self.beta[self.column_names.index(name)])

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def stars(self, idx: int) -> str:
        return "***" if self.p_values[idx] < 0.001 else ""

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.beta


def _find_collinear(x: np.ndarray, names: Sequence[str], tol: float) -> list[str]:
    """Columns that add nothing to the span of the columns before them."""
    offenders = []
    kept: list[int] = []
    for j in range(x.shape[1]):
        trial = x[:, kept + [j]]
        if np.linalg.matrix_rank(trial, tol=tol) == len(kept):
            offenders.append(names[j])
        else:
            kept.append(j)
    return offenders


def ols_fit(design: DesignMatrix) -> RegressionFit:
    """Least squares via QR with classical standard errors.

    Identically-zero columns (e.g. an interaction whose category pair
    never co-occurs) are dropped with a warning before fitting; any
    remaining exact collinearity is an error naming the offending
    columns.
    """
    x = design.x
    y = design.y
    keep = []
    dropped = []
    for idx, column in enumerate(design.columns):
        if np.all(x[:, idx] == 0):
            dropped.append(column.name)
        else:
            keep.append(idx)
    if dropped:
        warnings.warn(
            f"dropping identically-zero columns: {', '.join(dropped)}",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    columns = tuple(design.columns[i] for i in keep)
    x = x[:, keep]
    n, k = x.shape
    if n < k:
        raise InsufficientDataError(f"{n} rows cannot identify {k} coefficients")

    rank = np.linalg.matrix_rank(x)
    if rank < k:
        offenders = _find_collinear(x, [c.name for c in columns], tol=None)
        raise RankDeficientError(offenders)

    q, r = np.linalg.qr(x)
    beta = np.linalg.solve(r, q.T @ y)
    fitted = x @ beta
    resid = y - fitted
    rss = float(resid @ resid)
    dof = n - k
    # An exactly determined system has zero residuals and no error scale;
    # inference fields degrade to 0 / nan rather than blowing up.
    sigma2 = rss / dof if dof > 0 else 0.0
    r_inv = np.linalg.solve(r, np.eye(k))
    cov = sigma2 * (r_inv @ r_inv.T)
    stderr = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_values = np.where(stderr > 0, beta / stderr, np.inf)
    if dof > 0:
        p_values = 2.0 * sps.t.sf(np.abs(t_values), dof)
    else:
        p_values = np.full(k, np.nan)

    tss = float(np.sum((y - y.mean()) ** 2))
    if tss > 0:
        r_squared = 1.0 - rss / tss
    else:
        r_squared = 0.0
    r_squared = min(max(r_squared, 0.0), 1.0)
    if k > 1 and dof > 0 and rss > 0 and tss > rss:
        f_stat = ((tss - rss) / (k - 1)) / (rss / dof)
        f_p = float(sps.f.sf(f_stat, k - 1, dof))
    elif k > 1 and tss > rss:
        f_stat, f_p = float("inf"), 0.0
    else:
        f_stat, f_p = 0.0, 1.0
    return RegressionFit(
        columns=columns,
        beta=beta,
        stderr=stderr,
        t_values=t_values,
        p_values=p_values,
        n_obs=n,
        r_squared=r_squared,
        f_statistic=float(f_stat),
        f_p_value=f_p,
        dropped_columns=tuple(dropped),
        axes=design.axes,
    )
