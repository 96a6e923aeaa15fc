"""Coordinate MLPs for the distance and color fields, plus a small Adam."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm


# |log r| bound: exp(80) and exp(-80) are finite, normal float32 values
R_LOG_BOUND = 80.0


@dataclass
class NetworkConfig:
    udf_hidden: int = 64
    udf_layers: int = 4
    skip_in: tuple[int, ...] = (2,)
    multires: int = 6
    feature_dim: int = 64
    beta: float = 100.0
    # geometric init radius; 0 gives the cone |x|, a positive radius leaves a
    # zero-gradient region inside the init sphere after the softplus head
    init_radius: float = 0.0
    weight_norm: bool = True
    color_hidden: int = 64
    color_layers: int = 4
    multires_view: int = 4
    r_init: float = 0.05
    # r = exp(r_scale * rho): scales the optimizer's step on log r
    r_scale: float = 10.0

    @classmethod
    def full(cls) -> "NetworkConfig":
        """8 x 256 UDF trunk with a skip at layer 4."""
        return cls(udf_hidden=256, udf_layers=8, skip_in=(4,), feature_dim=256, color_hidden=256)


def positional_encode(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]``."""
    if n_freqs < 0:
        raise ValueError("frequency count must be non-negative")
    parts = [x]
    for level in range(n_freqs):
        arg = (2.0**level) * math.pi * x
        parts += [torch.sin(arg), torch.cos(arg)]
    return torch.cat(parts, dim=-1)


def encoded_dim(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


class UdfNetwork(nn.Module):
    """MLP from encoded points to (distance, feature vector).

    Hidden layers and the distance head use Softplus(beta); the input is
    concatenated back in before each layer listed in ``skip_in``.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = encoded_dim(cfg.multires)
        dims = [in_dim] + [cfg.udf_hidden] * cfg.udf_layers + [1 + cfg.feature_dim]
        self.skip_in = tuple(cfg.skip_in)
        layers = []
        for k in range(len(dims) - 1):
            out_dim = dims[k + 1] - in_dim if (k + 1) in self.skip_in else dims[k + 1]
            if out_dim < 1:
                raise ValueError(f"hidden width {cfg.udf_hidden} too small for a skip of width {in_dim}")
            lin = nn.Linear(dims[k], out_dim)
            self._geometric_init(lin, k, len(dims) - 1, in_dim, out_dim, dims[k + 1])
            if cfg.weight_norm:
                lin = weight_norm(lin)
            layers.append(lin)
        self.layers = nn.ModuleList(layers)
        if not (cfg.r_init > 0 and cfg.r_scale > 0):
            raise ValueError("r_init and r_scale must be positive")
        self.rho = nn.Parameter(torch.tensor(math.log(cfg.r_init) / cfg.r_scale))

    def _geometric_init(self, lin, k, n_lin, in_dim, out_dim, width):
        cfg = self.cfg
        with torch.no_grad():
            if k == n_lin - 1:
                torch.nn.init.normal_(lin.weight, mean=math.sqrt(math.pi) / math.sqrt(lin.in_features), std=1e-4)
                torch.nn.init.constant_(lin.bias, -cfg.init_radius)
            elif k == 0 and cfg.multires > 0:
                torch.nn.init.constant_(lin.bias, 0.0)
                torch.nn.init.constant_(lin.weight[:, 3:], 0.0)
                torch.nn.init.normal_(lin.weight[:, :3], 0.0, math.sqrt(2) / math.sqrt(out_dim))
            elif k in self.skip_in and cfg.multires > 0:
                torch.nn.init.constant_(lin.bias, 0.0)
                torch.nn.init.normal_(lin.weight, 0.0, math.sqrt(2) / math.sqrt(out_dim))
                torch.nn.init.constant_(lin.weight[:, -(in_dim - 3):], 0.0)
            else:
                torch.nn.init.constant_(lin.bias, 0.0)
                torch.nn.init.normal_(lin.weight, 0.0, math.sqrt(2) / math.sqrt(out_dim))

    @property
    def r(self) -> torch.Tensor:
        # bounded exponent keeps r finite and nonzero in float32 as well
        return torch.exp((self.cfg.r_scale * self.rho).clamp(-R_LOG_BOUND, R_LOG_BOUND))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        enc = positional_encode(x, self.cfg.multires)
        h = enc
        n = len(self.layers)
        for k, lin in enumerate(self.layers):
            if k in self.skip_in:
                h = torch.cat([h, enc], dim=-1) / math.sqrt(2)
            h = lin(h)
            if k < n - 1:
                h = F.softplus(h, beta=self.cfg.beta)
        d = F.softplus(h[..., 0], beta=self.cfg.beta)
        return d, h[..., 1:]

    def distance(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]

    def with_gradient(self, x: torch.Tensor, create_graph: bool = True):
        """Distance, feature and spatial gradient; the gradient stays differentiable."""
        with torch.enable_grad():
            if not x.requires_grad:
                x = x.detach().requires_grad_(True)
            d, feat = self.forward(x)
            (g,) = torch.autograd.grad(d, x, torch.ones_like(d), create_graph=create_graph)
        return d, feat, g


def udf_forward(net: UdfNetwork, x: torch.Tensor):
    return net(x)


def udf_spatial_gradient(net: UdfNetwork, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    return net.with_gradient(x, create_graph=create_graph)[2]


class ColorNetwork(nn.Module):
    """Radiance from (point, encoded view direction, normal, feature), sigmoid output."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = 3 + encoded_dim(cfg.multires_view) + 3 + cfg.feature_dim
        dims = [in_dim] + [cfg.color_hidden] * cfg.color_layers + [3]
        layers = []
        for k in range(len(dims) - 1):
            lin = nn.Linear(dims[k], dims[k + 1])
            if cfg.weight_norm:
                lin = weight_norm(lin)
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    def forward(self, x, view_dirs, normals, feat):
        h = torch.cat([x, positional_encode(view_dirs, self.cfg.multires_view), normals, feat], dim=-1)
        for k, lin in enumerate(self.layers):
            h = lin(h)
            if k < len(self.layers) - 1:
                h = F.relu(h)
        return torch.sigmoid(h)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)
    rejected: int = 0

    @classmethod
    def for_params(cls, params: Iterable[torch.Tensor], **kw) -> "AdamState":
        params = list(params)
        return cls(m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params: list[torch.Tensor], grads: list[Optional[torch.Tensor]], lr: float) -> bool:
    """One bias-corrected Adam update in place; returns False if rejected.

    A step with any non-finite gradient leaves parameters and moments intact.
    """
    if len(params) != len(state.m):
        raise ValueError("parameter count does not match optimizer state")
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("parameter, gradient and moment shapes must match")
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        state.rejected += 1
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return True


# Checkpoint layout (all integers little-endian):
#   magic   b"UDFCKPT\0"            8 bytes
#   version uint32                  currently 1
#   n_cfg   uint64, then n_cfg bytes of UTF-8 JSON (config + metadata)
#   n_arr   uint32
#   per array: name_len uint32, name UTF-8, ndim uint32, ndim x uint64 shape,
#              prod(shape) float64 values (C order, little-endian)
MAGIC = b"UDFCKPT\0"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, torch.Tensor], meta: dict) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr.detach().cpu().numpy(), dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(Path(path), "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n_cfg,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(n_cfg).decode())
        (n_arr,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_arr):
            (n_name,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n_name).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return arrays, meta


def network_arrays(udf: UdfNetwork, color: ColorNetwork) -> dict[str, torch.Tensor]:
    out = {f"udf.{k}": v for k, v in udf.state_dict().items()}
    out.update({f"color.{k}": v for k, v in color.state_dict().items()})
    return out


def networks_from_checkpoint(path, dtype=torch.float32) -> tuple[UdfNetwork, ColorNetwork, dict]:
    arrays, meta = load_checkpoint(path)
    cfg_doc = dict(meta["network"])
    cfg_doc["skip_in"] = tuple(cfg_doc["skip_in"])
    cfg = NetworkConfig(**cfg_doc)
    udf, color = UdfNetwork(cfg), ColorNetwork(cfg)
    for prefix, net in (("udf.", udf), ("color.", color)):
        state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
        net.load_state_dict(state)
        net.to(dtype)
    return udf, color, meta


def config_dict(cfg: NetworkConfig) -> dict:
    d = asdict(cfg)
    d["skip_in"] = list(cfg.skip_in)
    return d
