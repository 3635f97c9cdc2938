"""Continual policy distillation of scripted task experts into a
Transformer-MoE student, with replay selection, task embeddings, and
Acc/BWT reporting."""

__version__ = "0.1.0"
