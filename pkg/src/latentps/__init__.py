"""Bayesian principal stratification on a latent intermediate variable."""

from __future__ import annotations

__version__ = "0.1.0"
