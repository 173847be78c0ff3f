"""Intrinsic CAR and HomCAR priors for disease mapping."""

__version__ = "0.1.0"
