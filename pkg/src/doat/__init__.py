"""Delay-aware anycast overlay simulator: ring coordinates from a space-filling curve, Bloom-filter routing tables."""

__version__ = "0.1.0"
