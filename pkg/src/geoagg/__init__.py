"""Geometry-preserving aggregation of mixture-of-experts outputs."""
from .aggregation import (
    AggregatorKind,
    AllDegenerate,
    ExpertBundle,
    InvalidBundle,
    aggregate,
    collapse_ratio,
    linear_aggregate,
    norm_free_aggregate,
    sba_aggregate,
    unit_normalized_aggregate,
)
from .analysis import GeometryReport, accumulate_sample, merge, report_to_csv, report_to_json
from .sim import SimConfig, WeightMode, run_simulation, sample_bundle
from .sphere import (
    AntipodalDirections,
    BarycenterConfig,
    DegenerateInit,
    DegenerateVector,
    DimensionMismatch,
    NonConvergence,
    angle_between,
    decompose,
    exp_map,
    log_map,
    slerp,
    spherical_barycenter,
)

__version__ = "0.1.0"
