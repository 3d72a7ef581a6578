"""Poisson mixed-effect models with local influence diagnostics."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    DEFAULT_DESIGN,
    DesignMatrices,
    DesignSpec,
    PanelDataset,
    SubjectRecord,
    build_design,
    load_panel,
    write_panel,
)
from .model import (  # noqa: E402
    DEFAULT_RULE,
    FitResult,
    QuadratureRule,
    Theta,
    eb_estimate,
    fit_ml,
    score_and_hessian,
    subject_loglik,
    total_loglik,
)

__all__ = [
    "DEFAULT_DESIGN",
    "DEFAULT_RULE",
    "DesignMatrices",
    "DesignSpec",
    "FitResult",
    "PanelDataset",
    "QuadratureRule",
    "SubjectRecord",
    "Theta",
    "build_design",
    "eb_estimate",
    "fit_ml",
    "load_panel",
    "score_and_hessian",
    "subject_loglik",
    "total_loglik",
    "write_panel",
]
