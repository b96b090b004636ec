"""Damaged-bicycle re-identification toolkit: synthetic data generation,
multi-task transformer (ReID + damage detection), domain adaptation,
training, and retrieval/classification evaluation."""

__version__ = "0.1.0"
