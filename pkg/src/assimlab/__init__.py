"""assimlab: cultural-assimilation measurement from marginal audience counts."""

from .catalog import (
    DemographicAxis,
    GenerationProxy,
    Interest,
    InterestCatalog,
    PopulationSpec,
    ProxySettings,
    build_catalog,
    intersect_specs,
    resolve_proxy,
)
from .metrics import (
    AssimilationReport,
    FilterReport,
    InterestRatioVector,
    assimilation_ratios,
    demographic_proportions,
    filter_interests,
    interest_ratios,
    kde_density,
    median_ar_ci,
    top_k_interests,
    validate_proxy,
)
from .stats import encode_design, kruskal_wallis, ols_fit

__version__ = "0.1.0"

__all__ = [
    "AssimilationReport",
    "DemographicAxis",
    "FilterReport",
    "GenerationProxy",
    "Interest",
    "InterestCatalog",
    "InterestRatioVector",
    "PopulationSpec",
    "ProxySettings",
    "assimilation_ratios",
    "build_catalog",
    "demographic_proportions",
    "encode_design",
    "filter_interests",
    "interest_ratios",
    "intersect_specs",
    "kde_density",
    "kruskal_wallis",
    "median_ar_ci",
    "ols_fit",
    "resolve_proxy",
    "top_k_interests",
    "validate_proxy",
]
