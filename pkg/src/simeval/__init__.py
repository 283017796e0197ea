"""Simulated user evaluations of local explanations for tree-based fraud models."""

__version__ = "0.1.0"
