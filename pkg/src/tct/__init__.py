"""Self-supervised transaction-sequence embeddings with contrastive predictive coding."""

__version__ = "0.1.0"
