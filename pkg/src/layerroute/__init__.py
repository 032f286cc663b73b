"""Query-conditioned routing and fusion over a frozen multi-layer encoder."""

__version__ = "0.1.0"
