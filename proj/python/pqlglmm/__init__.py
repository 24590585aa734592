"""Penalized quasi-likelihood estimation and inference for independent-cluster
generalized linear mixed models."""

from pqlglmm._core import (
    Fit,
    fit,
    norm_quantile,
    shapiro_wilk,
    simulate_partnered5,
)

__all__ = [
    "Fit",
    "fit",
    "norm_quantile",
    "shapiro_wilk",
    "simulate_partnered5",
]
