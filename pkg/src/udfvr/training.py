"""Training state, one optimisation step and the run loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import Dataset
from .io import RunConfig, config_to_dict
from .neural import AdamState, ColorNetwork, UdfNetwork, adam_step, config_dict, network_arrays, save_checkpoint
from .pipeline import NeuralModel, RenderOptions, render_batch
from .supervision import color_loss, eikonal_loss, lr_schedule, mask_loss

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainState:
    cfg: RunConfig
    udf: UdfNetwork
    color: ColorNetwork
    adam_udf: AdamState
    adam_color: AdamState
    generator: torch.Generator
    iteration: int = 0
    skipped: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: RunConfig) -> "TrainState":
        torch.manual_seed(cfg.seed)
        dtype = DTYPES[cfg.train.dtype]
        udf = UdfNetwork(cfg.network).to(dtype)
        color = ColorNetwork(cfg.network).to(dtype)
        gen = torch.Generator().manual_seed(cfg.seed)
        return cls(
            cfg=cfg,
            udf=udf,
            color=color,
            adam_udf=AdamState.for_params(udf.parameters()),
            adam_color=AdamState.for_params(color.parameters()),
            generator=gen,
        )

    @property
    def model(self) -> NeuralModel:
        return NeuralModel(self.udf, self.color)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.cfg.train.dtype]

    def s_base(self) -> float:
        return self.cfg.sampler.s_base(self.iteration / max(self.cfg.train.iterations, 1))

    def lr(self) -> float:
        t = self.cfg.train
        return lr_schedule(self.iteration, t.iterations, t.warmup, t.lr_peak, t.lr_final, t.decay)

    def render_options(self) -> RenderOptions:
        t = self.cfg.train
        return RenderOptions(t.family, t.normal_k, t.inverse_normal_weights, t.color_placement, tuple(t.background))

    def save(self, path) -> None:
        meta = {
            "format": "udfvr-checkpoint",
            "iteration": self.iteration,
            "network": config_dict(self.cfg.network),
            "run": config_to_dict(self.cfg),
            "s_base": self.s_base(),
        }
        save_checkpoint(path, network_arrays(self.udf, self.color), meta)


def sample_batch(state: TrainState, data: Dataset):
    """Pick views, then pixels uniformly within each view."""
    t = state.cfg.train
    g = state.generator
    n_views = min(t.views_per_batch, data.n_views)
    views = torch.randperm(data.n_views, generator=g)[:n_views].numpy()
    per_view = [t.batch_rays // n_views + (1 if i < t.batch_rays % n_views else 0) for i in range(n_views)]
    n_pix = data.images.shape[1]
    v_idx, p_idx = [], []
    for v, m in zip(views, per_view):
        v_idx.append(np.full(m, v))
        p_idx.append(torch.randint(0, n_pix, (m,), generator=g).numpy())
    return np.concatenate(v_idx), np.concatenate(p_idx)


def batch_loss(state: TrainState, origins, dirs, target, mask=None, train: bool = True):
    """Render a ray batch and return ``(total, (L_c, L_e, L_m), render output)``.

    ``mask`` is only touched when the mask term is active.
    """
    cfg = state.cfg
    out = render_batch(state.model, origins, dirs, cfg.sampler, state.s_base(), state.render_options(),
                       state.generator, train=train)
    zero = torch.zeros((), dtype=origins.dtype)
    l_c = color_loss(out.color, target)
    l_e = eikonal_loss(out.grad) if out.grad is not None else zero
    l_m = mask_loss(out.acc, mask) if cfg.loss.mask > 0 and cfg.train.use_mask else zero
    total = l_c + cfg.loss.eikonal * l_e + cfg.loss.mask * l_m
    return total, (l_c, l_e, l_m), out


def train_step(state: TrainState, data: Dataset) -> Optional[dict]:
    """One iteration; returns the metrics record (``None`` if the step was skipped)."""
    dtype = state.dtype
    v_idx, p_idx = sample_batch(state, data)
    o = torch.from_numpy(data.origins[v_idx, p_idx]).to(dtype)
    d = torch.from_numpy(data.dirs[v_idx, p_idx]).to(dtype)
    target = torch.from_numpy(data.images[v_idx, p_idx]).to(dtype)
    mask = None
    if state.cfg.loss.mask > 0 and state.cfg.train.use_mask:
        mask = torch.from_numpy(data.masks[v_idx, p_idx]).to(dtype)
    loss, (l_c, l_e, l_m), _ = batch_loss(state, o, d, target, mask)

    lr = state.lr()
    record = {
        "iteration": state.iteration,
        "L_c": l_c.item(),
        "L_e": l_e.item(),
        "L_m": l_m.item(),
        "loss": loss.item(),
        "lr": lr,
        "r": state.udf.r.item(),
        "s": state.s_base(),
    }
    if not math.isfinite(record["loss"]):
        state.skipped += 1
        log.warning("iteration %d: non-finite loss %s, step skipped", state.iteration, record)
        state.iteration += 1
        return None
    udf_params = list(state.udf.parameters())
    color_params = list(state.color.parameters())
    grads = torch.autograd.grad(loss, udf_params + color_params, allow_unused=True)
    ok_u = adam_step(state.adam_udf, udf_params, list(grads[: len(udf_params)]), lr)
    ok_c = adam_step(state.adam_color, color_params, list(grads[len(udf_params) :]), lr)
    if not (ok_u and ok_c):
        state.skipped += 1
        log.warning("iteration %d: non-finite gradient, update rejected", state.iteration)
    state.iteration += 1
    return record


def train(state: TrainState, data: Dataset, out_dir, iterations: Optional[int] = None, progress=None) -> TrainState:
    """Run to ``iterations`` (default: the configured total), logging metrics as JSON lines."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = state.cfg.train.iterations if iterations is None else iterations
    t = state.cfg.train
    start = time.time()
    with open(out / "metrics.jsonl", "a") as log_fh:
        while state.iteration < total:
            rec = train_step(state, data)
            if rec is None:
                continue
            state.history.append(rec)
            if rec["iteration"] % t.log_every == 0 or state.iteration == total:
                log_fh.write(json.dumps({k: rec[k] for k in ("iteration", "L_c", "L_e", "L_m", "lr", "r", "s")}) + "\n")
                log_fh.flush()
                if progress:
                    progress(rec, time.time() - start)
            if t.checkpoint_every and state.iteration % t.checkpoint_every == 0:
                state.save(out / f"ckpt_{state.iteration:06d}.bin")
    state.save(out / "checkpoint.bin")
    return state
