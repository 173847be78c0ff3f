"""Posterior inference for BYM-type models with ICAR or HomCAR spatial effects."""

from .diagnostics import split_rhat
from .model import (
    BymFit,
    BymModelSpec,
    McmcConfig,
    fit_bym,
    poisson_loglik,
    posterior_mean_map,
)
from .quadrature import QuadratureGrid, QuadratureResult, brute_force_posterior

__all__ = [
    "BymFit",
    "BymModelSpec",
    "McmcConfig",
    "QuadratureGrid",
    "QuadratureResult",
    "brute_force_posterior",
    "fit_bym",
    "poisson_loglik",
    "posterior_mean_map",
    "split_rhat",
]
