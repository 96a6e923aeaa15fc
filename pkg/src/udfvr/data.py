"""Ground-truth views of analytic scenes and the multi-view dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .fields import AnalyticScene, Ray, Sphere
from .io import Camera, load_cameras, load_image, save_cameras, save_image
from .pipeline import lambert


def camera_rig(n_views: int, res: int, distance: float = 3.0, margin: float = 0.95) -> list[Camera]:
    """Cameras on a Fibonacci sphere looking at the origin, unit sphere in frame."""
    tan_half = math.tan(math.asin(1.0 / distance)) / margin
    f = 0.5 * res / tan_half
    c = 0.5 * (res - 1)
    golden = math.pi * (3 - math.sqrt(5))
    cams = []
    for i in range(n_views):
        z = 1 - 2 * (i + 0.5) / n_views
        rho = math.sqrt(1 - z * z)
        eye = distance * np.array([rho * math.cos(golden * i), rho * math.sin(golden * i), z])
        up = np.array([0.0, 0.0, 1.0]) if abs(z) < 0.99 else np.array([0.0, 1.0, 0.0])
        cams.append(Camera.look_at(eye, np.zeros(3), up, f, f, c, c, res, res))
    return cams


def _surface_normal(prim, point):
    if isinstance(prim, Sphere):
        n = point - np.asarray(prim.center)
    else:
        n = np.asarray(prim.normal, dtype=np.float64)
    return n / np.linalg.norm(n)


def render_ground_truth(scene: AnalyticScene, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Flat albedo + two-sided Lambert at the first oracle hit; mask = silhouette."""
    origins, dirs = cam.all_rays()
    rgb = np.zeros((len(dirs), 3))
    mask = np.zeros(len(dirs))
    for i, (o, v) in enumerate(zip(origins, dirs)):
        hits = scene.hits(Ray(o, v, 0.0, np.inf))
        if not hits:
            continue
        t, _, k = hits[0]
        prim = scene.primitives[k]
        rgb[i] = lambert(np.asarray(prim.albedo), _surface_normal(prim, o + t * v))
        mask[i] = 1.0
    shape = (cam.height, cam.width)
    return rgb.reshape(*shape, 3), mask.reshape(shape)


def synth_views(scene: AnalyticScene, out_dir, n_views: int = 20, res: int = 64, masks: bool = True) -> list[Camera]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cams = camera_rig(n_views, res)
    for i, cam in enumerate(cams):
        rgb, mask = render_ground_truth(scene, cam)
        save_image(out / "images" / f"{i:03d}.png", rgb, mask if masks else None)
    save_cameras(out / "cameras.json", cams)
    return cams


@dataclass
class Dataset:
    cameras: list[Camera]
    images: np.ndarray  # (V, H*W, 3)
    origins: np.ndarray  # (V, H*W, 3)
    dirs: np.ndarray  # (V, H*W, 3)
    _masks: Optional[np.ndarray] = None  # (V, H*W)

    @property
    def masks(self) -> np.ndarray:
        if self._masks is None:
            raise ValueError("dataset has no masks")
        return self._masks

    @property
    def has_masks(self) -> bool:
        return self._masks is not None

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    cams = load_cameras(root / "cameras.json")
    images, masks, origins, dirs = [], [], [], []
    for i, cam in enumerate(cams):
        rgb, mask = load_image(root / "images" / f"{i:03d}.png")
        if rgb.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"image {i} does not match its camera size")
        images.append(rgb.reshape(-1, 3))
        masks.append(None if mask is None else mask.reshape(-1))
        o, d = cam.all_rays()
        origins.append(o)
        dirs.append(d)
    have = [m is not None for m in masks]
    if any(have) and not all(have):
        raise ValueError("either all or no images must carry an alpha mask")
    return Dataset(
        cameras=cams,
        images=np.stack(images),
        origins=np.stack(origins),
        dirs=np.stack(dirs),
        _masks=np.stack(masks) if all(have) else None,
    )
