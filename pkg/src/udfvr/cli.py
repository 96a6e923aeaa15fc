"""Command line: synth-views, train, render, verify-bias, extract, chamfer."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

THREADS_ENV = "UDFVR_THREADS"

log = logging.getLogger("udfvr")


class Outputs:
    """Paths a command creates; removed again if the command fails."""

    def __init__(self):
        self._paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self._paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in reversed(self._paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _scene(args):
    from .fields import builtin_scene, load_scene

    if getattr(args, "scene_file", None):
        return load_scene(args.scene_file)
    return builtin_scene(args.scene)


def _probe_ray(scene):
    """Ray along +z through the unit sphere, slightly off-axis to avoid symmetric ties."""
    from .fields import Ray
    from .sampling import sphere_clip

    o = np.array([0.013, 0.007, -2.0])
    v = np.array([0.0, 0.0, 1.0])
    near, far, hit = sphere_clip(torch.tensor(o)[None], torch.tensor(v)[None])
    return Ray(o, v, float(near[0]), float(far[0]))


def cmd_synth_views(args, out: Outputs) -> int:
    from .data import synth_views

    scene = _scene(args)
    out.add(args.out)
    synth_views(scene, args.out, n_views=args.views, res=args.res, masks=not args.no_masks)
    print(f"wrote {args.views} views of '{scene.name}' to {args.out}")
    return 0


def cmd_train(args, out: Outputs) -> int:
    from .data import load_dataset
    from .desk import desk_config
    from .io import RunConfig, load_config, save_config
    from .training import TrainState, train

    if args.config:
        cfg = load_config(args.config)
    elif args.desk:
        cfg = desk_config()
    else:
        cfg = RunConfig()
    updates = {}
    if args.data:
        updates["data_dir"] = args.data
    if args.out:
        updates["output_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    cfg = dataclasses.replace(cfg, **updates)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, iterations=args.iterations))
    data = load_dataset(cfg.data_dir)
    if cfg.train.use_mask and cfg.loss.mask > 0 and not data.has_masks:
        raise ValueError("mask loss enabled but the dataset has no alpha masks (set train.use_mask false)")
    out.add(cfg.output_dir)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    save_config(Path(cfg.output_dir) / "config.json", cfg)

    def progress(rec, elapsed):
        log.info("it %6d  L_c %.4f  L_e %.4f  L_m %.4f  r %.3g  lr %.2e  (%.0fs)",
                 rec["iteration"], rec["L_c"], rec["L_e"], rec["L_m"], rec["r"], rec["lr"], elapsed)

    state = train(TrainState.create(cfg), data, cfg.output_dir, progress=progress)
    print(f"trained {state.iteration} iterations ({state.skipped} skipped); checkpoint {cfg.output_dir}/checkpoint.bin")
    return 0


def cmd_render(args, out: Outputs) -> int:
    from .io import load_cameras, save_image
    from .neural import networks_from_checkpoint
    from .pipeline import AnalyticModel, NeuralModel, RenderOptions, render_image
    from .sampling import SamplerConfig

    cams = load_cameras(args.cameras)
    sampler = SamplerConfig(perturb=False)
    opts = RenderOptions(family=args.family)
    if args.checkpoint:
        udf, color, meta = networks_from_checkpoint(args.checkpoint)
        model = NeuralModel(udf, color)
        s_base = float(meta.get("s_base", sampler.s_final))
        run = meta.get("run", {}).get("train", {})
        opts = RenderOptions(
            family=run.get("family", args.family),
            normal_k=run.get("normal_k", 3),
            inverse_normal_weights=run.get("inverse_normal_weights", False),
            color_placement=run.get("color_placement", "left"),
            background=tuple(run.get("background", (0.0, 0.0, 0.0))),
        )
        dtype = torch.float32
    else:
        model = AnalyticModel(_scene(args), r=args.r)
        s_base = sampler.s_final
        dtype = torch.float64
    views = args.views if args.views is not None else range(len(cams))
    out_dir = out.add(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in views:
        if not 0 <= i < len(cams):
            raise ValueError(f"view {i} out of range (have {len(cams)} cameras)")
        cam = cams[i]
        o, d = cam.all_rays()
        rgb, acc = render_image(model, torch.from_numpy(o).to(dtype), torch.from_numpy(d).to(dtype), sampler, s_base, opts)
        save_image(out_dir / f"{i:03d}.png", rgb.double().numpy().reshape(cam.height, cam.width, 3),
                   acc.double().numpy().reshape(cam.height, cam.width) if args.alpha else None)
    print(f"rendered {len(list(views))} views to {out_dir}")
    return 0


def cmd_verify_bias(args, out: Outputs) -> int:
    from .evaluation import random_transversal_ray, verify_naive_bias, verify_neudf

    scene = _scene(args)
    if args.rays > 0:
        rng = np.random.default_rng(args.seed)
        rays = [random_transversal_ray(scene, rng, min_hits=len(scene.primitives)) for _ in range(args.rays)]
    else:
        rays = [_probe_ray(scene)]
    reports = []
    for ray in rays:
        if args.renderer == "naive":
            reports.append(verify_naive_bias(scene, ray, s_values=args.s, n=args.n, delta=args.delta))
        else:
            reports.append(verify_neudf(scene, ray, r_values=args.r, family=args.family, n=args.n,
                                        delta=args.delta, perturbation=args.perturbation))
    text = "\n\n".join(r.to_text() for r in reports)
    n_pass = sum(r.passed for r in reports)
    text += f"\n\n{n_pass}/{len(reports)} rays passed all checks"
    print(text)
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        out.add(prefix.with_suffix(".txt")).write_text(text + "\n")
        docs = [json.loads(r.to_json()) for r in reports]
        out.add(prefix.with_suffix(".json")).write_text(json.dumps(docs if len(docs) > 1 else docs[0], indent=2) + "\n")
    return 0 if n_pass == len(reports) else 1


def cmd_extract(args, out: Outputs) -> int:
    from .evaluation import NeuralField, extract_surface_points, write_ply
    from .neural import networks_from_checkpoint

    if args.checkpoint:
        udf, _, _ = networks_from_checkpoint(args.checkpoint, dtype=torch.float64)
        field = NeuralField(udf)
    else:
        field = _scene(args)
    cloud = extract_surface_points(field, n=args.n, eps=args.eps, iters=args.iters, seed=args.seed)
    write_ply(out.add(args.out), cloud.points)
    print(f"kept {len(cloud.points)} of {cloud.n_seeds} seeds (eps={cloud.eps}); wrote {args.out}")
    return 0


def cmd_chamfer(args, out: Outputs) -> int:
    from .evaluation import chamfer, normalize_to_unit_sphere, read_ply

    a, b = read_ply(args.a), read_ply(args.b)
    if not args.raw:
        (b, a), _ = normalize_to_unit_sphere(b, a)
    print(f"{chamfer(a, b):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udfvr", description="Unsigned distance field volume rendering toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_args(sp, default="disk"):
        sp.add_argument("--scene", default=default, help="built-in scene: disk, two-planes, sphere")
        sp.add_argument("--scene-file", help="JSON scene description (overrides --scene)")

    sp = sub.add_parser("synth-views", help="render ground-truth views of an analytic scene")
    scene_args(sp)
    sp.add_argument("--out", default="data")
    sp.add_argument("--views", type=int, default=20)
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--no-masks", action="store_true", help="write RGB without alpha masks")
    sp.set_defaults(func=cmd_synth_views)

    sp = sub.add_parser("train", help="optimise the networks on a view dataset")
    sp.add_argument("--config", help="RunConfig JSON")
    sp.add_argument("--desk", action="store_true", help="start from the single-core desk configuration")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render PNG views from a checkpoint or an analytic scene")
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--checkpoint")
    scene_args(sp)
    sp.add_argument("--r", type=float, default=1e3, help="density sharpness for analytic scenes")
    sp.add_argument("--family", default="rational")
    sp.add_argument("--views", type=int, nargs="*")
    sp.add_argument("--alpha", action="store_true", help="store accumulated opacity as alpha")
    sp.add_argument("--out", default="renders")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("verify-bias", help="numeric weight-bias checks on analytic scenes")
    scene_args(sp, default="two-planes")
    sp.add_argument("--renderer", choices=("naive", "udf"), default="naive")
    sp.add_argument("--s", type=float, nargs="+", default=[1e2, 1e3, 1e4])
    sp.add_argument("--r", type=float, nargs="+", default=[10.0, 1e2, 1e3, 1e4])
    sp.add_argument("--family", default="rational")
    sp.add_argument("--n", type=int, default=2**14)
    sp.add_argument("--delta", type=float, default=0.01)
    sp.add_argument("--perturbation", type=float, default=0.0)
    sp.add_argument("--rays", type=int, default=0, help="random transversal rays instead of the probe ray")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output prefix for .txt and .json reports")
    sp.set_defaults(func=cmd_verify_bias)

    sp = sub.add_parser("extract", help="project seeds onto the zero level set, write PLY")
    sp.add_argument("--checkpoint")
    scene_args(sp)
    sp.add_argument("--n", type=int, default=100_000)
    sp.add_argument("--eps", type=float, default=1e-3)
    sp.add_argument("--iters", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="points.ply")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("chamfer", help="Chamfer distance between two PLY clouds")
    sp.add_argument("a")
    sp.add_argument("b", help="reference cloud; defines the unit-sphere normalisation")
    sp.add_argument("--raw", action="store_true", help="skip unit-sphere normalisation")
    sp.set_defaults(func=cmd_chamfer)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    out = Outputs()
    try:
        return args.func(args, out)
    except KeyboardInterrupt:
        out.cleanup()
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line cause, no traceback
        out.cleanup()
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
