"""Revformer - reversible vision transformers trained without activation caching."""

__version__ = "0.1.0"
