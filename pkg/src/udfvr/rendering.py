"""Occlusion-aware UDF rendering weights and alpha compositing.

All functions operate on torch tensors whose last dimension indexes samples
along a ray, so single rays ``(n,)`` and batches ``(B, n)`` share one code
path. Sample ``i`` and ``i + 1`` bound bin ``i``; a ray with ``n`` samples
has ``n - 1`` bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch

FAMILIES = ("rational", "exp", "arctan")


@dataclass(frozen=True)
class DensityFamily:
    """Cumulative density ``sigma_r`` applied to unsigned distances.

    ``kind`` selects ``rd/(1+rd)``, ``1-exp(-rd)`` or ``(2/pi) atan(rd)``.
    ``r`` may be a float or a (learnable) scalar tensor.
    """

    kind: str = "rational"
    r: float | torch.Tensor = 0.05

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown density family {self.kind!r}")
        if not isinstance(self.r, torch.Tensor) and not self.r > 0:
            raise ValueError("r must be positive")

    def __call__(self, d: torch.Tensor) -> torch.Tensor:
        return sigma_r(self, d)

    def derivative(self, d: torch.Tensor) -> torch.Tensor:
        r = self.r
        x = r * d
        if self.kind == "rational":
            return r / (1 + x) ** 2
        if self.kind == "exp":
            return r * torch.exp(-x)
        return (2 / math.pi) * r / (1 + x * x)

    def second_derivative(self, d: torch.Tensor) -> torch.Tensor:
        r = self.r
        x = r * d
        if self.kind == "rational":
            return -2 * r * r / (1 + x) ** 3
        if self.kind == "exp":
            return -r * r * torch.exp(-x)
        return -(4 / math.pi) * r * r * x / (1 + x * x) ** 2


def sigma_r(family: DensityFamily, d: torch.Tensor) -> torch.Tensor:
    if bool((d < 0).any()):
        raise ValueError("unsigned distances must be non-negative")
    x = family.r * d
    if family.kind == "rational":
        return x / (1 + x)
    if family.kind == "exp":
        return -torch.expm1(-x)
    return (2 / math.pi) * torch.atan(x)


@dataclass
class RaySampleSet:
    """Sorted ray parameters with cached distances (and optionally gradients)."""

    t: torch.Tensor
    psi: torch.Tensor
    origins: Optional[torch.Tensor] = None
    dirs: Optional[torch.Tensor] = None
    grad: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.t.shape[-1] < 2:
            raise ValueError("a ray needs at least two samples")
        if self.t.shape != self.psi.shape:
            raise ValueError("t and psi must have the same shape")
        if bool((self.t[..., 1:] <= self.t[..., :-1]).any()):
            raise ValueError("sample parameters must be strictly increasing")
        if bool((self.psi < 0).any()):
            raise ValueError("distances must be non-negative")

    @property
    def points(self) -> torch.Tensor:
        return self.origins[..., None, :] + self.t[..., None] * self.dirs[..., None, :]

    def directional_derivative(self) -> torch.Tensor:
        """d psi / d t from the cached field gradient."""
        return (self.grad * self.dirs[..., None, :]).sum(-1)


@dataclass
class WeightProfile:
    alpha: torch.Tensor  # (..., n-1) per-bin opacity
    trans: torch.Tensor  # (..., n) transmittance at each sample node
    weights: torch.Tensor  # (..., n-1) per-bin weight T_i * alpha_i

    @property
    def acc(self) -> torch.Tensor:
        return self.weights.sum(-1)

    @property
    def trans_end(self) -> torch.Tensor:
        return self.trans[..., -1]

    def mass_between(self, i: int, j: int) -> torch.Tensor:
        """Cumulative weight between sample nodes ``i`` and ``j``."""
        return self.trans[..., i] - self.trans[..., j]


def composite(survival: torch.Tensor) -> WeightProfile:
    """Build a profile from per-bin survival factors ``1 - alpha``.

    Transmittance is the running product of the survival factors, so for
    telescoping factors it is exact up to rounding.
    """
    ones = torch.ones_like(survival[..., :1])
    trans = torch.cat([ones, torch.cumprod(survival, dim=-1)], dim=-1)
    alpha = 1 - survival
    return WeightProfile(alpha=alpha, trans=trans, weights=trans[..., :-1] * alpha)


def survival_from_sigma(sig: torch.Tensor) -> torch.Tensor:
    """``1 - alpha_i = min / max`` of the two bin-end sigma values (1 if both vanish)."""
    a, b = sig[..., :-1], sig[..., 1:]
    hi = torch.maximum(a, b)
    lo = torch.minimum(a, b)
    positive = hi > 0
    return torch.where(positive, lo / torch.where(positive, hi, torch.ones_like(hi)), torch.ones_like(hi))


def alpha_compose(samples: RaySampleSet | torch.Tensor, family: DensityFamily) -> WeightProfile:
    psi = samples.psi if isinstance(samples, RaySampleSet) else samples
    return composite(survival_from_sigma(sigma_r(family, psi)))


def alpha_compose_sigma(sig: torch.Tensor) -> WeightProfile:
    """Composite precomputed sigma values (bin opacity ``(max - min) / max``)."""
    return composite(survival_from_sigma(sig))


def composite_color(
    profile: WeightProfile,
    colors: torch.Tensor,
    background: Optional[torch.Tensor] = None,
    placement: str = "left",
) -> torch.Tensor:
    """``C = sum_i w_i c_i`` plus the background for the unabsorbed remainder.

    ``colors`` holds one color per sample ``(..., n, 3)``; ``placement``
    picks which sample colors a bin (left endpoint or endpoint average).
    """
    if placement == "left":
        bin_colors = colors[..., :-1, :]
    elif placement == "midpoint":
        bin_colors = 0.5 * (colors[..., :-1, :] + colors[..., 1:, :])
    else:
        raise ValueError(f"unknown color placement {placement!r}")
    c = (profile.weights[..., None] * bin_colors).sum(-2)
    if background is not None:
        c = c + (1 - profile.acc)[..., None] * background
    return c


def render_ray(
    field: Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]],
    color_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    samples: RaySampleSet,
    family: DensityFamily,
    background: Optional[torch.Tensor] = None,
    placement: str = "left",
) -> tuple[torch.Tensor, WeightProfile, torch.Tensor]:
    """Render ray colors given a distance field and a color function.

    ``field(points) -> (psi, grad)`` and ``color_fn(points, dirs) -> rgb``
    are evaluated at the sample points; cached ``samples.psi`` is ignored.
    """
    pts = samples.points
    psi, grad = field(pts)
    dirs = samples.dirs[..., None, :].expand_as(pts)
    colors = color_fn(pts, dirs)
    profile = alpha_compose(psi, family)
    c = composite_color(profile, colors, background, placement)
    return c, profile, profile.acc


def tau_r_continuous(samples: RaySampleSet, family: DensityFamily) -> tuple[torch.Tensor, torch.Tensor]:
    """Opaque density ``|d/dt ln sigma(psi(t))|`` at each sample.

    Returns the density and a validity mask; nodes with ``psi == 0`` are
    singular and reported as invalid with density 0.
    """
    dpsi = samples.directional_derivative()
    psi = samples.psi
    valid = psi > 0
    sig = sigma_r(family, psi)
    safe = torch.where(valid, sig, torch.ones_like(sig))
    tau = torch.where(valid, (family.derivative(psi) * dpsi).abs() / safe, torch.zeros_like(sig))
    return tau, valid


def point_weights(samples: RaySampleSet, family: DensityFamily) -> torch.Tensor:
    """Rendering weight evaluated at the samples, ``tau(t_i) * T(t_i)``.

    ``T`` is the discrete (telescoping) transmittance up to node ``i``.
    """
    tau, _ = tau_r_continuous(samples, family)
    return tau * alpha_compose(samples, family).trans


def naive_neus_weights(samples: RaySampleSet | torch.Tensor, s: float) -> WeightProfile:
    """NeuS-style discrete weights with the sigmoid as cumulative density.

    Bins where the sigmoid increases along the ray get their negative
    opacity clamped to zero.
    """
    psi = samples.psi if isinstance(samples, RaySampleSet) else samples
    phi = torch.sigmoid(s * psi)
    a, b = phi[..., :-1], phi[..., 1:]
    survival = torch.clamp(b / a, max=1.0)
    return composite(survival)


def dump_profile(path, t, psi, sig, profile: WeightProfile) -> None:
    """Write one tab-separated row per bin: t, psi, sigma, alpha, T, w."""
    t, psi, sig = (torch.as_tensor(v).reshape(-1) for v in (t, psi, sig))
    alpha = profile.alpha.reshape(-1)
    trans = profile.trans.reshape(-1)
    w = profile.weights.reshape(-1)
    with open(path, "w") as fh:
        fh.write("t\tpsi\tsigma\talpha\tT\tw\n")
        for i in range(alpha.shape[0]):
            fh.write(
                f"{float(t[i]):.17g}\t{float(psi[i]):.17g}\t{float(sig[i]):.17g}\t"
                f"{float(alpha[i]):.17g}\t{float(trans[i]):.17g}\t{float(w[i]):.17g}\n"
            )
