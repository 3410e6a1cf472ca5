"""Dimension-reduced multivariate regression for spatially correlated data."""

__version__ = "0.1.0"

from .envopt import EnvelopeFit, EnvelopeParams, OptimizerConfig, fit, select_u
from .model import SpatialDataset
from .predict import predict, predict_grid
from .spatialcov import MaternModel

__all__ = [
    "EnvelopeFit",
    "EnvelopeParams",
    "MaternModel",
    "OptimizerConfig",
    "SpatialDataset",
    "fit",
    "predict",
    "predict_grid",
    "select_u",
    "__version__",
]
