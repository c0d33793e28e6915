"""Query-dependent video moment retrieval and highlight detection engine."""

__version__ = "0.1.0"
