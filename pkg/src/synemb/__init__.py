"""Syntactic sentence embeddings learned from parallel text and target-side UPOS tags."""

__version__ = "0.1.0"


class SynEmbError(Exception):
    """Base class for user-facing errors (bad input files, bad arguments)."""


class FormatError(SynEmbError, ValueError):
    """An input file does not follow its declared format."""
