"""catscope: cat-state dark-photon detector simulation and inference."""

__version__ = "0.1.0"
