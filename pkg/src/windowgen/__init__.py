"""Spatiotemporal window-by-window scene video generation at toy scale."""

__version__ = "0.1.0"
