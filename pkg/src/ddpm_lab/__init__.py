"""Discrete-time DDPM laboratory: analytic targets, samplers and convergence diagnostics."""

__version__ = "0.1.0"
