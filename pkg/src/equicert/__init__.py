"""Equivalence-based robustness certification and adversarial training toolkit."""

__version__ = "0.1.0"
