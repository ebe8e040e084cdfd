"""Hierarchical sparse transformers with self-attention regularization."""

__version__ = "0.1.0"
