"""Diffusion models for synthetic genotype cohorts."""
__version__ = "0.1.0"
