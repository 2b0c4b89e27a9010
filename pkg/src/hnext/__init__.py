"""Rotation-equivariant harmonic networks on complex grids, in numpy."""

__version__ = "0.1.0"
