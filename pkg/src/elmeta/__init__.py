"""Publication-bias-corrected meta-analysis via semi-parametric
empirical likelihood under a probit selection model."""

from .model import (
    DegenerateModelError,
    FullParams,
    MetaDataset,
    SelectionParams,
    StudyRecord,
    effect_density_given_se,
    p_select_given_se,
    p_select_given_study,
    selection_probit,
)

__all__ = [
    "DegenerateModelError",
    "FullParams",
    "MetaDataset",
    "SelectionParams",
    "StudyRecord",
    "effect_density_given_se",
    "p_select_given_se",
    "p_select_given_study",
    "selection_probit",
]

__version__ = "0.1.0"
