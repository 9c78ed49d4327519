"""Resonance gaps for scattering by potentials with hyperbolic trapped sets."""

__version__ = "0.1.0"
