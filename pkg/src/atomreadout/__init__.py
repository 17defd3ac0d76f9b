"""Simulation and inference toolkit for state-dependent fluorescence readout
of a small array of trapped Rb-87 atoms."""

__version__ = "0.1.0"
