"""Toy-scale two-expert transformer for multi-turn sparse voxel generation and editing."""

__version__ = "0.1.0"
