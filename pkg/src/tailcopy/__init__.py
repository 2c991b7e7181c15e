"""Deterministic simulator of file-based ordered message delivery across clusters."""

__version__ = "0.1.0"
