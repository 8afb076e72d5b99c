"""Test-time adaptation with a memory-bank driven dynamic learning rate."""

__version__ = "0.1.0"
