"""Grounding spatial referring expressions to 2-D locations.

The pipeline: parse a composite instruction into (referent, predicate)
relation tuples, estimate a mixture of object-anchored polar distributions
per tuple (either a fitted table of canonical parameters or a learned graph
network), multiply the resulting score fields together, and take the best
grid cell.
"""

from polarground.polar import (
    KAPPA_MAX,
    VAR_MIN,
    ContradictionError,
    GridSpec,
    MixtureComponent,
    PolarParams,
    ScoreField,
    SpatialMixture,
    bessel_i,
    combine_score_fields,
    fit_polar_mle,
    gaussian_pdf,
    grid_argmax,
    mixture_score,
    polar_log_score,
    sample_polar,
    score_field,
    von_mises_pdf,
)

__all__ = [
    "KAPPA_MAX",
    "VAR_MIN",
    "ContradictionError",
    "GridSpec",
    "MixtureComponent",
    "PolarParams",
    "ScoreField",
    "SpatialMixture",
    "bessel_i",
    "combine_score_fields",
    "fit_polar_mle",
    "gaussian_pdf",
    "grid_argmax",
    "mixture_score",
    "polar_log_score",
    "sample_polar",
    "score_field",
    "von_mises_pdf",
]

__version__ = "0.1.0"
