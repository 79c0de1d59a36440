"""Diffusion warm-started, collision-aware MPC for a planar arm."""

__version__ = "0.1.0"
