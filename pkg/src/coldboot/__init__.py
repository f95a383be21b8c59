"""Startup acceleration toolkit for large distributed training jobs."""
__version__ = "0.1.0"
