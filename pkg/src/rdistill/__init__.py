"""Reprogramming distillation for frozen teacher models."""

from .cka import center_gram, cka, cka_loss, gram, hsic
from .losses import LossWeights, cross_entropy, kl_distill, rd_loss, schedule_weights

__version__ = "0.1.0"

__all__ = [
    "LossWeights",
    "center_gram",
    "cka",
    "cka_loss",
    "cross_entropy",
    "gram",
    "hsic",
    "kl_distill",
    "rd_loss",
    "schedule_weights",
]
