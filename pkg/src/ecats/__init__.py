"""Concept-based anomaly detection for trajectories with Signal Temporal Logic concepts."""

__version__ = "0.1.0"
