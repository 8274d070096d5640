"""Categorical latent Gaussian processes: density estimation and embedding of categorical data."""

__version__ = "0.1.0"

from .errors import CatLGPError
from .inference import ElboEstimate, VariationalPosterior, elbo, elbo_gradients
from .kernel import KernelParams
from .model import CategoricalDataset, ModelConfig
from .training import FittedModel, effective_dims, fit, select_latent_dim, train_error

__all__ = [
    "CatLGPError",
    "CategoricalDataset",
    "ElboEstimate",
    "FittedModel",
    "KernelParams",
    "ModelConfig",
    "VariationalPosterior",
    "effective_dims",
    "elbo",
    "elbo_gradients",
    "fit",
    "select_latent_dim",
    "train_error",
]
