"""Desk-scale quantization-aware training with stochastic feature perturbation."""

__version__ = "0.1.0"
