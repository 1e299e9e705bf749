"""Classification, logits distillation and the composite reprogramming-distillation objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .cka import cka_loss
from .errors import InvalidEpoch, InvalidInput, InvalidLabel, InvalidTemperature, ShapeMismatch


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def _logits(z: torch.Tensor, name: str) -> torch.Tensor:
    if z.dim() != 2:
        raise ShapeMismatch(f"{name} must be (n, C), got shape {tuple(z.shape)}")
    if z.shape[1] < 2:
        raise InvalidInput(f"{name} needs at least 2 classes, got {z.shape[1]}")
    if not torch.isfinite(z).all():
        raise InvalidInput(f"{name} contains NaN or Inf")
    return z


def cross_entropy(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross entropy of logits ``z`` against integer labels ``y``."""
    z = _logits(z, "logits")
    y = torch.as_tensor(y)
    if y.dim() != 1 or y.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"labels shape {tuple(y.shape)} does not match logits {tuple(z.shape)}")
    if y.numel() and (y.min() < 0 or y.max() >= z.shape[1]):
        raise InvalidLabel(f"labels must lie in [0, {z.shape[1]})")
    return F.cross_entropy(z, y.long())


def kl_distill(z_t: torch.Tensor, z_s: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """KL(softmax(z_t/T) || softmax(z_s/T)), batch mean, scaled by T**2.

    Gradient is not stopped on ``z_t``: both logit sources are trainable here.
    """
    if not temperature > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    z_t = _logits(z_t, "z_t")
    z_s = _logits(z_s, "z_s")
    if z_t.shape != z_s.shape:
        raise ShapeMismatch(f"logit shapes differ: {tuple(z_t.shape)} vs {tuple(z_s.shape)}")
    log_p_t = F.log_softmax(z_t / temperature, dim=1)
    log_p_s = F.log_softmax(z_s / temperature, dim=1)
    kl = F.kl_div(log_p_s, log_p_t, reduction="batchmean", log_target=True)
    return kl * temperature**2


def rd_loss(
    y: torch.Tensor,
    z_t: torch.Tensor,
    z_s: torch.Tensor,
    f_t: torch.Tensor | None,
    f_s: torch.Tensor | None,
    w: LossWeights,
    use_cka: bool = True,
    temperature: float = 1.0,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Co-training objective.

    ``CE(y, z_s) + alpha * CE(y, z_t) + beta * (KL(z_t, z_s) + L_cka(f_t, f_s))``;
    with ``use_cka=False`` the CKA term is dropped. Returns the total and a dict of
    the detached parts (``ce_s``, ``ce_t``, ``kl``, ``cka``) for logging.
    """
    n = z_s.shape[0]
    if z_t.shape[0] != n or y.shape[0] != n:
        raise ShapeMismatch("batch sizes of labels and logits disagree")
    ce_s = cross_entropy(z_s, y)
    ce_t = cross_entropy(z_t, y)
    kl = kl_distill(z_t, z_s, temperature)
    total = ce_s + w.alpha * ce_t + w.beta * kl
    cka_term = torch.zeros((), dtype=ce_s.dtype)
    if use_cka:
        if f_t is None or f_s is None:
            raise InvalidInput("use_cka requires both feature matrices")
        if f_t.shape[0] != n or f_s.shape[0] != n:
            raise ShapeMismatch("batch sizes of features and logits disagree")
        cka_term = cka_loss(f_t, f_s)
        total = total + w.beta * cka_term
    parts = {
        "ce_s": ce_s.item(),
        "ce_t": ce_t.item(),
        "kl": kl.item(),
        "cka": float(cka_term.item()),
    }
    return total, parts


def schedule_weights(
    epoch: int, total_epochs: int, initial: float = 1.0, final: float = 0.0
) -> LossWeights:
    """Linearly decay alpha and beta from ``initial`` (epoch 0) to ``final`` (epoch ``total_epochs``)."""
    if total_epochs < 1:
        raise InvalidEpoch(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise InvalidEpoch(f"epoch {epoch} outside [0, {total_epochs}]")
    value = initial + (final - initial) * (epoch / total_epochs)
    value = max(value, 0.0)
    return LossWeights(alpha=value, beta=value)


__all__ = ["LossWeights", "cross_entropy", "kl_distill", "rd_loss", "schedule_weights"]
