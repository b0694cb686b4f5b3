"""Bayesian hierarchical voxel-wise probit classification with spatial priors."""

__version__ = "0.1.0"
