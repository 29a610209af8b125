"""Benchmarking toolkit for transcript-to-structured-note generation."""

__version__ = "0.1.0"
FORMAT_VERSION = "1"
