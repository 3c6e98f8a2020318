"""Condition-aware lossy video compression and transmission toolkit."""

__version__ = "0.1.0"
