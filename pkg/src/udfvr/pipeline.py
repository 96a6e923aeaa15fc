"""Batched ray rendering shared by training, image rendering and tests.

A model supplies ``distance``, ``geometry`` and ``color``; the neural and
the analytic model differ only in where those come from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .fields import AnalyticScene, Ray
from .neural import ColorNetwork, UdfNetwork
from .rendering import DensityFamily, WeightProfile, alpha_compose, composite_color
from .sampling import SamplerConfig, coarse_samples, importance_resample, sphere_clip
from .supervision import regularized_normal

LIGHT_DIR = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])
AMBIENT = 0.35


def lambert(albedo, normals, light=LIGHT_DIR, ambient=AMBIENT):
    """Two-sided flat albedo + Lambert shading (open surfaces have no inside)."""
    cos = np.abs(normals @ light) if isinstance(normals, np.ndarray) else (normals @ torch.as_tensor(light, dtype=normals.dtype)).abs()
    return albedo * (ambient + (1 - ambient) * cos[..., None])


class NeuralModel:
    def __init__(self, udf: UdfNetwork, color: ColorNetwork):
        self.udf = udf
        self.color_net = color

    @property
    def r(self) -> torch.Tensor:
        return self.udf.r

    def distance(self, pts: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.udf.distance(pts)

    def geometry(self, pts: torch.Tensor, create_graph: bool):
        if create_graph:
            return self.udf.with_gradient(pts, create_graph=True)
        d, feat, g = self.udf.with_gradient(pts, create_graph=False)
        return d.detach(), feat.detach(), g.detach()

    def color(self, pts, dirs, normals, feat):
        return self.color_net(pts, dirs, normals, feat)

    def parameters(self):
        return list(self.udf.parameters()) + list(self.color_net.parameters())


class AnalyticModel:
    """An analytic scene standing in for both networks, with fixed ``r``.

    With ``oracle_nodes`` the exact ray-surface hits are added as samples so
    the survival reaches zero at the crossing instead of leaking through.
    """

    def __init__(self, scene: AnalyticScene, r: float = 1e3, oracle_nodes: bool = True):
        self.scene = scene
        self._r = r
        self.oracle_nodes = oracle_nodes

    @property
    def r(self) -> float:
        return self._r

    def _eval(self, pts: torch.Tensor):
        flat = pts.detach().reshape(-1, 3).cpu().numpy().astype(np.float64)
        d, g = self.scene.eval(flat)
        shape = pts.shape[:-1]
        return (
            torch.from_numpy(d).to(pts.dtype).reshape(shape),
            torch.from_numpy(g).to(pts.dtype).reshape(*shape, 3),
        )

    def distance(self, pts):
        return self._eval(pts)[0]

    def geometry(self, pts, create_graph: bool):
        d, g = self._eval(pts)
        return d, None, g

    def surface_nodes(self, o: torch.Tensor, v: torch.Tensor, near: torch.Tensor, far: torch.Tensor):
        """Oracle hit distances ``(B, K)``, padded with ``far``; None if disabled."""
        if not self.oracle_nodes:
            return None
        o_np, v_np = o.detach().double().numpy(), v.detach().double().numpy()
        rows = [
            [h[0] for h in self.scene.hits(Ray(o_np[i], v_np[i], float(near[i]), float(far[i])))]
            for i in range(len(o_np))
        ]
        k = max((len(r) for r in rows), default=0)
        if k == 0:
            return None
        out = far[:, None].repeat(1, k).clone()
        for i, r in enumerate(rows):
            if r:
                out[i, : len(r)] = torch.tensor(r, dtype=out.dtype)
        return out

    def color(self, pts, dirs, normals, feat):
        flat = pts.detach().reshape(-1, 3).cpu().numpy().astype(np.float64)
        albedo = torch.from_numpy(self.scene.albedo(flat)).to(pts.dtype).reshape(*pts.shape)
        return lambert(albedo, normals)


@dataclass
class RenderOptions:
    family: str = "rational"
    normal_k: int = 3
    inverse_normal_weights: bool = False
    color_placement: str = "left"
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (B, 3)
    acc: torch.Tensor  # (B,)
    hit: torch.Tensor  # (B,) ray enters the unit sphere
    t: Optional[torch.Tensor] = None  # (B_hit, n)
    psi: Optional[torch.Tensor] = None
    grad: Optional[torch.Tensor] = None
    is_new: Optional[torch.Tensor] = None
    profile: Optional[WeightProfile] = None


def render_batch(
    model,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    sampler: SamplerConfig,
    s_base: float,
    opts: RenderOptions = RenderOptions(),
    generator: Optional[torch.Generator] = None,
    train: bool = False,
) -> RenderOutput:
    """Render rays inside the unit sphere; rays missing it see the background."""
    dtype = origins.dtype
    bg = torch.tensor(opts.background, dtype=dtype)
    near, far, hit = sphere_clip(origins, dirs)
    color = bg.expand(origins.shape[0], 3).clone()
    acc = torch.zeros(origins.shape[0], dtype=dtype)
    if not bool(hit.any()):
        return RenderOutput(color=color, acc=acc, hit=hit)
    o, v = origins[hit], dirs[hit]
    perturb = train and sampler.perturb
    t = coarse_samples(near[hit], far[hit], sampler.n_coarse, perturb, generator)
    pts = o[:, None, :] + t[..., None] * v[:, None, :]
    psi = model.distance(pts)
    res = importance_resample(o, v, t, psi, model.distance, sampler, s_base, generator, deterministic=not perturb)
    t, is_new = res.t, res.is_new
    extra = model.surface_nodes(o, v, near[hit], far[hit]) if hasattr(model, "surface_nodes") else None
    if extra is not None:
        t, order = torch.sort(torch.cat([t, extra], dim=-1), dim=-1)
        is_new = torch.cat([is_new, torch.zeros_like(extra, dtype=torch.bool)], dim=-1).gather(-1, order)
    pts = o[:, None, :] + t[..., None] * v[:, None, :]
    d, feat, g = model.geometry(pts, create_graph=train)
    normals, _ = regularized_normal(g, pts, opts.normal_k, opts.inverse_normal_weights)
    view = v[:, None, :].expand_as(pts)
    rgb = model.color(pts, view, normals, feat)
    family = DensityFamily(opts.family, model.r)
    profile = alpha_compose(d, family)
    c = composite_color(profile, rgb, bg, opts.color_placement)
    idx = hit.nonzero()[:, 0]
    color = color.index_put((idx,), c)
    acc = acc.index_put((idx,), profile.acc)
    return RenderOutput(color=color, acc=acc, hit=hit, t=t, psi=d, grad=g, is_new=is_new, profile=profile)


def render_image(model, origins, dirs, sampler, s_base, opts=RenderOptions(), chunk: int = 1024):
    """Render ``(N, 3)`` rays in chunks without gradients; returns (rgb, acc)."""
    colors, accs = [], []
    for i in range(0, origins.shape[0], chunk):
        with torch.no_grad():
            out = render_batch(model, origins[i : i + chunk], dirs[i : i + chunk], sampler, s_base, opts)
        colors.append(out.color)
        accs.append(out.acc)
    return torch.cat(colors), torch.cat(accs)
