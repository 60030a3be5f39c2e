"""Masked per-biomarker cross-entropy and soft-target binary cross-entropy."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def masked_cross_entropy(logits: torch.Tensor, bins: torch.Tensor, mask: torch.Tensor):
    """Mean cross-entropy over present (sample, biomarker) pairs.

    ``logits`` is ``[b, B, T]``; ``bins`` and ``mask`` are ``[b, T]``.
    Returns ``(loss, skipped)``; ``skipped`` is true when no pair is present,
    in which case the loss is a graph-connected zero.
    """
    b, B, T = logits.shape
    bins = torch.as_tensor(bins, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if bins.shape != (b, T) or mask.shape != (b, T):
        raise ValueError(f"targets must be [{b} x {T}], got bins {tuple(bins.shape)}, mask {tuple(mask.shape)}")
    present = bins[mask]
    if present.numel() and (present.min() < 0 or present.max() >= B):
        raise ValueError(f"bin index outside [0, {B - 1}]")
    if not mask.any():
        return logits.sum() * 0.0, True
    logp = F.log_softmax(logits, dim=1).transpose(1, 2)  # [b, T, B]
    picked = logp[mask].gather(1, present.unsqueeze(1))
    return -picked.mean(), False


def per_pair_nll(logits: torch.Tensor, bins: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``[b, T]`` negative log-likelihoods, zero where the mask is false."""
    bins = torch.as_tensor(bins, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    logp = F.log_softmax(logits, dim=1)
    idx = bins.clamp(min=0).unsqueeze(1)
    nll = -logp.gather(1, idx).squeeze(1)
    return torch.where(mask, nll, torch.zeros_like(nll))


def bce_soft(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    y = torch.as_tensor(y, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets {tuple(y.shape)} do not match logits {tuple(logits.shape)}")
    if ((y < 0) | (y > 1)).any():
        raise ValueError("soft labels must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(logits, y)
