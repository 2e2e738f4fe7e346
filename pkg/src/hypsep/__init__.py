"""Hierarchical near/far source separation with hyperbolic (Poincare-ball) embeddings."""

__version__ = "0.1.0"
