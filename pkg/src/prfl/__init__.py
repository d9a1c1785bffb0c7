"""Federated learning with bidirectional distillation and low-rank update compression."""
__version__ = "0.1.0"
