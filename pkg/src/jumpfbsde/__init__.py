"""Partial-information control of coupled forward-backward SDEs with Poisson jumps."""

__version__ = "0.1.0"
