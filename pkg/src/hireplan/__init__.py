"""Hierarchical replanning agent for embodied instruction following in a grid household."""

__version__ = "0.1.0"
