"""Skeleton-only group activity recognition with optional pseudo action labels."""

__version__ = "0.1.0"
