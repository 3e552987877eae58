"""Cycle-accounting simulator of a tiled many-core processor with a
software-reconfigurable banked memory hierarchy."""

__version__ = "0.1.0"
