"""Multi-behavior sequential recommendation with a multi-scale Transformer and a hypergraph view."""

__version__ = "0.1.0"
