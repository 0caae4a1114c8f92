"""Predictive-coding input purification against adversarial examples."""

__version__ = "0.1.0"
