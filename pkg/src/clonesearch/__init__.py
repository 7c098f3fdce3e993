"""Disk-resident vector index for function-level code clone search."""

__version__ = "0.1.0"
