"""Desk-scale workbench for one renormalization-group step of lattice QED3."""

__version__ = "0.1.0"
