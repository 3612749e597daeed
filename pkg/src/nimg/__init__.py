"""Desk-scale sparse-MoE diffusion transformer training stack."""

__version__ = "0.1.0"
