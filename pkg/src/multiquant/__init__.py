"""Arbitrary bit-width networks composed from 2-bit branches."""

__version__ = "0.1.0"
