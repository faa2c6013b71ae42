"""Energy-aware training toolkit: activation-sparsity penalty, zero-skipping energy model."""

__version__ = "0.1.0"
