"""Evidential uncertainty quantification with subjective logic and vacuity-regularized WGANs."""

__version__ = "0.1.0"
