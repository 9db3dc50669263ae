"""Pointer-generator summarization with supervised copy switching."""

__version__ = "1.0.0"
