"""Normal regularization, loss terms and the learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class LossWeights:
    eikonal: float = 0.1
    mask: float = 0.1

    def __post_init__(self):
        if self.eikonal < 0 or self.mask < 0:
            raise ValueError("loss weights must be non-negative")


def regularized_normal(
    grads: torch.Tensor,
    points: torch.Tensor,
    k: int = 3,
    inverse: bool = False,
    eps: float = 1e-12,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace each sample's gradient by a weighted mean of its predecessors'.

    Sample ``i`` averages the gradients of samples ``i-1 ... i-K`` with
    weights ``|p_i - p_{i-k}|^2`` (or their inverse), then normalises.
    Samples with fewer than ``K`` predecessors use the ones available;
    the first sample keeps its own gradient. Returns ``(normals, fallback)``
    where ``fallback`` flags samples that had fewer than ``K`` predecessors.
    """
    if k < 1:
        raise ValueError("K must be at least 1")
    n = grads.shape[-2]
    num = torch.zeros_like(grads)
    den = torch.zeros_like(grads[..., :1])
    for j in range(1, k + 1):
        if j >= n:
            break
        diff = points[..., j:, :] - points[..., :-j, :]
        w = (diff * diff).sum(-1, keepdim=True)
        if inverse:
            w = 1.0 / (w + eps)
        pad = torch.zeros_like(grads[..., :j, :])
        num = num + torch.cat([pad, w * grads[..., :-j, :]], dim=-2)
        den = den + torch.cat([pad[..., :1], w], dim=-2)
    first = torch.zeros_like(den, dtype=torch.bool)
    first[..., 0, :] = True
    avg = torch.where(first | (den <= 0), grads, num / torch.where(den > 0, den, torch.ones_like(den)))
    norm = torch.linalg.norm(avg, dim=-1, keepdim=True)
    normals = avg / torch.clamp(norm, min=eps)
    fallback = torch.arange(n) < k
    return normals, fallback.expand(grads.shape[:-1])


def color_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    if pred.shape != truth.shape:
        raise ValueError("prediction and target batches differ in shape")
    return (pred - truth).abs().mean()


def eikonal_loss(gradients: torch.Tensor) -> torch.Tensor:
    if gradients.numel() == 0:
        raise ValueError("eikonal loss needs at least one gradient")
    return ((torch.linalg.norm(gradients, dim=-1) - 1.0) ** 2).mean()


def mask_loss(acc: torch.Tensor, mask: torch.Tensor, clamp: float = 1e-6) -> torch.Tensor:
    acc = acc.clamp(clamp, 1 - clamp)
    mask = mask.to(acc.dtype)
    return -(mask * torch.log(acc) + (1 - mask) * torch.log1p(-acc)).mean()


def lr_schedule(
    it: int,
    total: int,
    warmup: int = 5000,
    peak: float = 2e-4,
    final: float = 1e-5,
    shape: str = "cosine",
) -> float:
    """Linear warm-up to ``peak`` then decay to ``final`` at ``total``."""
    if it < 0:
        raise ValueError("iteration must be non-negative")
    if warmup > 0 and it < warmup:
        return peak * it / warmup
    span = max(total - warmup, 1)
    progress = min((it - warmup) / span, 1.0)
    if shape == "cosine":
        return final + (peak - final) * 0.5 * (1 + math.cos(math.pi * progress))
    if shape == "linear":
        return peak + (final - peak) * progress
    raise ValueError(f"unknown decay shape {shape!r}")
