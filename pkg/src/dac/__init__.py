"""Diffusion actor-critic for desk-scale offline RL."""

__version__ = "0.1.0"
