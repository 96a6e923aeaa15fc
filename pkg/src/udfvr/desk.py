"""Desk-scale end-to-end protocol: synthesize views, train, extract, score."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import load_dataset, synth_views
from .evaluation import NeuralField, extract_surface_points, scene_chamfer, write_ply
from .fields import builtin_scene
from .io import RunConfig, TrainConfig, save_config
from .neural import NetworkConfig
from .sampling import SamplerConfig
from .training import TrainState, train

log = logging.getLogger(__name__)


# initial r under the exp(10 * rho) parameterisation with rho starting at 0.05
DESK_R_INIT = math.exp(10 * 0.05)


def desk_config(iterations: int = 20000, seed: int = 0, data_dir="data", output_dir="run") -> RunConfig:
    """Single-core budget: 128 rays x (32 coarse + 2 x 16) samples per iteration."""
    warmup = min(5000, iterations // 4)
    return RunConfig(
        data_dir=str(data_dir),
        output_dir=str(output_dir),
        seed=seed,
        network=NetworkConfig(r_init=DESK_R_INIT),
        sampler=SamplerConfig(n_coarse=32, n_rounds=2, n_per_round=16),
        train=TrainConfig(iterations=iterations, batch_rays=128, warmup=warmup),
    )


@dataclass
class EndToEndResult:
    chamfer: float
    n_points: int
    retention: float
    seconds: float
    final_r: float


def run_end_to_end(
    work_dir,
    scene_name: str = "disk",
    cfg: Optional[RunConfig] = None,
    n_views: int = 20,
    res: int = 64,
    n_seeds: int = 100_000,
    progress=None,
) -> EndToEndResult:
    work = Path(work_dir)
    cfg = cfg or desk_config()
    cfg = dataclasses.replace(cfg, data_dir=str(work / "data"), output_dir=str(work / "run"))
    scene = builtin_scene(scene_name)
    start = time.time()
    synth_views(scene, cfg.data_dir, n_views=n_views, res=res, masks=True)
    data = load_dataset(cfg.data_dir)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    save_config(Path(cfg.output_dir) / "config.json", cfg)
    state = train(TrainState.create(cfg), data, cfg.output_dir, progress=progress)
    cloud = extract_surface_points(NeuralField(state.udf), n=n_seeds, seed=cfg.seed)
    write_ply(Path(cfg.output_dir) / "points.ply", cloud.points)
    cd = scene_chamfer(cloud.points, scene, seed=cfg.seed)
    return EndToEndResult(cd, len(cloud.points), cloud.retention, time.time() - start, state.udf.r.item())
