"""Flavor-embedding toolkit: human-annotated flavor distances and machine
embeddings of wine, aligned into one 2D flavor space."""

__version__ = "0.1.0"
