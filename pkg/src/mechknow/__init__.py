"""Systematic knowledge of 2D image transformations, learned from synthetic
causal image pairs and reused in a hypothesis-verification classifier."""

__version__ = "0.1.0"
