"""Thermo-mechanical eigenstrain-based reduced-order homogenization for polycrystals."""
__version__ = "0.1.0"
