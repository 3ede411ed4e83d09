"""Numerical laboratory for diffusions degenerating on invariant surfaces."""

__version__ = "0.1.0"
