"""Desk-scale two-stage avatar generation: multi-view diffusion then UV-Gaussian reconstruction."""

__version__ = "0.1.0"
