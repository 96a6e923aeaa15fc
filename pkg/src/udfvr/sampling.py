"""Coarse ray sampling and the hierarchical zeta_s importance sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .rendering import composite

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    n_coarse: int = 64
    n_rounds: int = 2
    n_per_round: int = 32
    s0: float = 0.05
    # s0 is annealed geometrically towards s_final over training
    s_final: float = 64.0
    perturb: bool = True

    def __post_init__(self):
        if min(self.n_coarse, self.n_per_round) < 1 or self.n_rounds < 0:
            raise ValueError("sample counts must be positive")
        if not (self.s0 > 0 and self.s_final > 0):
            raise ValueError("sharpness must be positive")

    def s_base(self, progress: float) -> float:
        progress = min(max(progress, 0.0), 1.0)
        return self.s0 * (self.s_final / self.s0) ** progress

    def round_sharpness(self, s_base: float, z: int) -> float:
        """Sharpness for up-sampling round ``z`` (1-based)."""
        return s_base * 2.0 ** (z - 1)


def sphere_clip(origins: torch.Tensor, dirs: torch.Tensor, radius: float = 1.0):
    """Entry/exit parameters of the origin-centred sphere.

    Returns ``(t_near, t_far, hit)``; tangent rays count as misses and
    origins inside the sphere get ``t_near = 0``.
    """
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius**2
    disc = b * b - c
    hit = disc > 0
    root = torch.sqrt(torch.clamp(disc, min=0.0))
    near = torch.clamp(-b - root, min=0.0)
    far = -b + root
    hit = hit & (far > 0)
    return near, far, hit


def zeta_s(d: torch.Tensor, s: float) -> torch.Tensor:
    """Logistic density ``s e^{-sd} / (1 + e^{-sd})^2``, decreasing for d > 0."""
    e = torch.exp(-s * d)
    return s * e / (1 + e) ** 2


def coarse_samples(
    near: torch.Tensor,
    far: torch.Tensor,
    n: int,
    perturb: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    u = torch.linspace(0.0, 1.0, n, dtype=near.dtype)
    u = u.expand(*near.shape, n).clone()
    if perturb and n > 1:
        jitter = torch.rand(*near.shape, 1, generator=generator, dtype=near.dtype) - 0.5
        # shift the whole grid by up to half a step, keeping it inside the chord
        u = torch.clamp(u + jitter / (n - 1), 0.0, 1.0)
        u, _ = torch.sort(u, dim=-1)
    return near[..., None] + (far - near)[..., None] * u


def sampling_weights(t: torch.Tensor, psi: torch.Tensor, s: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Smoothed, normalised importance weights per bin.

    The density ``zeta_s(psi)`` is integrated per bin with the trapezoid
    rule and alpha-composited; each bin then takes the max over itself and
    its neighbours before normalisation. Returns ``(w'', degenerate)``
    where ``degenerate`` marks rays that fell back to uniform weights.
    """
    tau = zeta_s(psi, s)
    dt = t[..., 1:] - t[..., :-1]
    depth = 0.5 * (tau[..., 1:] + tau[..., :-1]) * dt
    w = composite(torch.exp(-depth)).weights
    left = torch.cat([w[..., :1], w[..., :-1]], dim=-1)
    right = torch.cat([w[..., 1:], w[..., -1:]], dim=-1)
    w = torch.maximum(w, torch.maximum(left, right))
    total = w.sum(-1, keepdim=True)
    degenerate = ~(total[..., 0] > 0)
    uniform = torch.full_like(w, 1.0 / w.shape[-1])
    w = torch.where(degenerate[..., None], uniform, w / torch.where(total > 0, total, torch.ones_like(total)))
    return w, degenerate


def stratified_uniforms(shape, m: int, generator=None, dtype=torch.float64, deterministic: bool = False):
    k = torch.arange(m, dtype=dtype)
    if deterministic:
        jitter = torch.full((*shape, m), 0.5, dtype=dtype)
    else:
        jitter = torch.rand(*shape, m, generator=generator, dtype=dtype)
    return (k + jitter) / m


def sample_pdf(t: torch.Tensor, weights: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF draws from a piecewise-constant density over the bins of ``t``."""
    cdf = torch.cumsum(weights, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    cdf = cdf / cdf[..., -1:]
    u = u.contiguous()
    idx = torch.searchsorted(cdf.contiguous(), u, right=True)
    below = torch.clamp(idx - 1, 0, t.shape[-1] - 2)
    c0 = torch.gather(cdf, -1, below)
    c1 = torch.gather(cdf, -1, below + 1)
    t0 = torch.gather(t, -1, below)
    t1 = torch.gather(t, -1, below + 1)
    denom = c1 - c0
    frac = torch.where(denom > 0, (u - c0) / torch.where(denom > 0, denom, torch.ones_like(denom)), torch.zeros_like(u))
    return t0 + torch.clamp(frac, 0.0, 1.0) * (t1 - t0)


@dataclass
class ResampleResult:
    t: torch.Tensor
    psi: torch.Tensor
    is_new: torch.Tensor
    degenerate: torch.Tensor


def importance_resample(
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t: torch.Tensor,
    psi: torch.Tensor,
    distance_fn: Callable[[torch.Tensor], torch.Tensor],
    cfg: SamplerConfig,
    s_base: float,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = False,
) -> ResampleResult:
    """Hierarchically add ``n_rounds * n_per_round`` samples per ray.

    ``distance_fn(points)`` returns unsigned distances for ``(..., m, 3)``
    points; it is called once per round on the new samples only.
    """
    is_new = torch.zeros_like(t, dtype=torch.bool)
    degenerate = torch.zeros(t.shape[:-1], dtype=torch.bool)
    lo, hi = t[..., :1], t[..., -1:]
    for z in range(1, cfg.n_rounds + 1):
        s = cfg.round_sharpness(s_base, z)
        w, deg = sampling_weights(t, psi, s)
        degenerate |= deg
        u = stratified_uniforms(t.shape[:-1], cfg.n_per_round, generator, t.dtype, deterministic)
        new_t = torch.clamp(sample_pdf(t, w, u), lo, hi)
        pts = origins[..., None, :] + new_t[..., None] * dirs[..., None, :]
        new_psi = distance_fn(pts).to(psi.dtype)
        t, order = torch.sort(torch.cat([t, new_t], -1), dim=-1, stable=True)
        psi = torch.gather(torch.cat([psi, new_psi], -1), -1, order)
        flags = torch.cat([is_new, torch.ones_like(new_t, dtype=torch.bool)], -1)
        is_new = torch.gather(flags, -1, order)
    if bool(degenerate.any()):
        log.debug("%d rays fell back to uniform resampling", int(degenerate.sum()))
    return ResampleResult(t=t, psi=psi, is_new=is_new, degenerate=degenerate)

