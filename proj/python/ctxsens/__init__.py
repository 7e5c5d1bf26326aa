"""Per-post context sensitivity: aggregation, regressors, evaluation and augmentation."""

from ._core import (
    Bundle,
    Model,
    ValidationError,
    __version__,
    aupr,
    augment,
    cross_validate,
    load_bundle,
    load_combined,
    load_model,
    mae,
    mse,
    paired_bootstrap,
    roc_auc,
    train,
)

__all__ = [
    "Bundle",
    "Model",
    "ValidationError",
    "__version__",
    "aupr",
    "augment",
    "cross_validate",
    "load_bundle",
    "load_combined",
    "load_model",
    "mae",
    "mse",
    "paired_bootstrap",
    "roc_auc",
    "train",
]
