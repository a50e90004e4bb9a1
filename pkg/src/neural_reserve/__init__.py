"""Attention-head ablation laboratory for GPT-2 perplexity experiments."""

__version__ = "0.1.0"
