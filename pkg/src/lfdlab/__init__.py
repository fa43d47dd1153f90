"""Instrumented toy-transformer lab for layer fused decoding."""

__version__ = "0.1.0"
