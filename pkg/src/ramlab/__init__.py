"""Retrieval-augmented classifiers trained end to end, with the tooling to study them."""

__version__ = "0.1.0"
