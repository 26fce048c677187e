"""Semantics-enhanced temporal graph networks and a tiered caching simulator."""

__version__ = "0.1.0"
