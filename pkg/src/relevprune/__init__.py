"""Explainability-guided visual token pruning on a toy multimodal LM."""

__version__ = "0.1.0"
