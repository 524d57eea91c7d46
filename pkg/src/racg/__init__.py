"""Retrieval-augmented code comment generation with a jointly trained
dense retriever and sequence-to-sequence generator."""

__version__ = "0.1.0"
