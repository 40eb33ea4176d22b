"""Desk-scale semi-supervised acoustic model training.

Teacher/student distillation with top-k soft targets, scheduled learning
over labeled and unlabeled data, and two simulated distributed SGD
protocols (threshold-compressed gradients and blockwise model-update
filtering).
"""

__version__ = "0.1.0"
