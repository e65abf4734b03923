"""Desk-scale benchmark harness and baselines for cross-domain any-way
any-shot few-shot image classification."""

__version__ = "0.1.0"
