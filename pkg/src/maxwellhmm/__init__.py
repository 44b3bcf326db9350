"""Heterogeneous multiscale solver for time-harmonic Maxwell problems."""

__version__ = "0.1.0"
