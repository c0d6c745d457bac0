"""Generalized approximate message passing and its state evolution."""

__version__ = "0.1.0"
