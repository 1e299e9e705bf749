"""Linear-kernel Gram centering, HSIC and CKA.

Everything is evaluated in float64 and cast back to the dtype of the inputs,
because double centering of a Gram matrix is prone to cancellation. All
functions accept numpy arrays or torch tensors; gradients flow through torch
tensors as usual.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DegenerateBatch, DegenerateFeatures, InvalidInput, ShapeMismatch

# Relative floor on ||HKH||_F / ||K||_F below which a Gram matrix counts as
# constant. Relative rather than absolute so CKA stays scale invariant.
DEGENERATE_RTOL = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _features(f, name: str = "features") -> torch.Tensor:
    f = _as_tensor(f)
    if f.dim() == 1:
        f = f.unsqueeze(1)
    if f.dim() != 2:
        raise InvalidInput(f"{name} must be an (n, d) matrix, got shape {tuple(f.shape)}")
    if not torch.isfinite(f).all():
        raise InvalidInput(f"{name} contains NaN or Inf")
    return f


def _square(K, name: str) -> torch.Tensor:
    K = _as_tensor(K)
    if K.dim() != 2 or K.shape[0] != K.shape[1]:
        raise ShapeMismatch(f"{name} must be square, got shape {tuple(K.shape)}")
    if K.shape[0] < 2:
        raise DegenerateBatch(f"need at least 2 samples to center, got n={K.shape[0]}")
    return K


def gram(f) -> torch.Tensor:
    """Linear Gram matrix ``f @ f.T`` of an (n, d) feature matrix."""
    f = _features(f).double()
    return f @ f.T


def center_gram(K) -> torch.Tensor:
    """Doubly center ``K``, i.e. ``H K H`` with ``H = I - 11^T / n``.

    Uses the means-subtraction identity, O(n^2) and no explicit ``H``.
    """
    K = _square(K, "K").double()
    return K - K.mean(dim=0, keepdim=True) - K.mean(dim=1, keepdim=True) + K.mean()


def centering_matrix(n: int, dtype=torch.float64) -> torch.Tensor:
    return torch.eye(n, dtype=dtype) - torch.full((n, n), 1.0 / n, dtype=dtype)


def _hsic_centered(Kc: torch.Tensor, Lc: torch.Tensor) -> torch.Tensor:
    n = Kc.shape[0]
    return (Kc * Lc).sum() / (n - 1) ** 2


def hsic(K, L) -> torch.Tensor:
    """Biased empirical HSIC: Frobenius inner product of the centered Grams over (n-1)^2."""
    K = _square(K, "K")
    L = _square(L, "L")
    if K.shape != L.shape:
        raise ShapeMismatch(f"Gram matrices differ in size: {tuple(K.shape)} vs {tuple(L.shape)}")
    out_dtype = torch.promote_types(K.dtype, L.dtype)
    return _hsic_centered(center_gram(K), center_gram(L)).to(out_dtype)


def _check_nondegenerate(K: torch.Tensor, Kc: torch.Tensor, name: str) -> None:
    scale = torch.linalg.matrix_norm(K.detach())
    if torch.linalg.matrix_norm(Kc.detach()) <= DEGENERATE_RTOL * scale:
        raise DegenerateFeatures(f"{name} features are constant across the batch; CKA is undefined")


def cka(f_t, f_s) -> torch.Tensor:
    """Linear CKA between two feature matrices sharing the batch dimension.

    Returns a 0-dim tensor in [0, 1] with the dtype of the inputs.
    Raises DegenerateFeatures when either side has (numerically) constant rows.
    """
    f_t = _features(f_t, "f_t")
    f_s = _features(f_s, "f_s")
    if f_t.shape[0] != f_s.shape[0]:
        raise ShapeMismatch(f"batch sizes differ: {f_t.shape[0]} vs {f_s.shape[0]}")
    if f_t.shape[0] < 2:
        raise DegenerateBatch(f"need at least 2 samples, got n={f_t.shape[0]}")
    out_dtype = torch.promote_types(f_t.dtype, f_s.dtype)
    if not out_dtype.is_floating_point:
        out_dtype = torch.float64

    K, L = gram(f_t), gram(f_s)
    Kc, Lc = center_gram(K), center_gram(L)
    _check_nondegenerate(K, Kc, "f_t")
    _check_nondegenerate(L, Lc, "f_s")
    kl = _hsic_centered(Kc, Lc)
    kk = _hsic_centered(Kc, Kc)
    ll = _hsic_centered(Lc, Lc)
    return (kl / torch.sqrt(kk * ll)).to(out_dtype)


def cka_loss(f_t, f_s) -> torch.Tensor:
    """Negative CKA, in [-1, 0]. Differentiable with respect to both inputs."""
    return -cka(f_t, f_s)


__all__ = [
    "DEGENERATE_RTOL",
    "center_gram",
    "centering_matrix",
    "cka",
    "cka_loss",
    "gram",
    "hsic",
]
