"""Retrieval, sentence-level evidence reading and evidence-guided generation."""

__version__ = "0.1.0"
