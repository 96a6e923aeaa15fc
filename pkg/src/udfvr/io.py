"""Cameras, images and run configuration files."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from PIL import Image

from .fields import Ray
from .neural import NetworkConfig
from .sampling import SamplerConfig
from .supervision import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant 1")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def directions(self, px: np.ndarray) -> np.ndarray:
        """World-space unit directions through pixel coordinates ``(N, 2)`` = (x, y)."""
        px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
        cam = np.stack(
            [(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))], axis=1
        )
        world = cam @ self.rotation
        return world / np.linalg.norm(world, axis=1, keepdims=True)

    def all_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and directions for every pixel in row-major order."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        px = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        dirs = self.directions(px)
        return np.broadcast_to(self.center, dirs.shape).copy(), dirs

    def to_dict(self) -> dict:
        return {
            "intrinsics": [self.fx, self.fy, self.cx, self.cy],
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(fx, fy, cx, cy, rot, -rot @ eye, width, height)


def pixel_to_ray(cam: Camera, px) -> Ray:
    x, y = (float(v) for v in px)
    if not (0 <= x <= cam.width - 1 and 0 <= y <= cam.height - 1):
        raise ValueError(f"pixel {px} outside a {cam.width}x{cam.height} image")
    return Ray(cam.center, cam.directions(np.array([[x, y]]))[0])


_CAMERA_FIELDS = {"intrinsics": 4, "rotation": 9, "translation": 3}


def load_cameras(path) -> list[Camera]:
    """Read a JSON array of ``{intrinsics, rotation, translation, width, height}``."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise ConfigError(f"{path}: expected a JSON array of cameras")
    cams = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise ConfigError(f"camera {i}: expected an object")
        for name, size in _CAMERA_FIELDS.items():
            vals = entry.get(name)
            if not isinstance(vals, list) or len(vals) != size or not all(
                isinstance(v, (int, float)) for v in vals
            ):
                raise ConfigError(f"camera {i}: field '{name}' must be {size} numbers")
        for name in ("width", "height"):
            if not isinstance(entry.get(name), int):
                raise ConfigError(f"camera {i}: field '{name}' must be an integer")
        extra = set(entry) - set(_CAMERA_FIELDS) - {"width", "height"}
        if extra:
            raise ConfigError(f"camera {i}: unknown field '{sorted(extra)[0]}'")
        fx, fy, cx, cy = entry["intrinsics"]
        try:
            cams.append(Camera(fx, fy, cx, cy, entry["rotation"], entry["translation"], entry["width"], entry["height"]))
        except ValueError as exc:
            raise ConfigError(f"camera {i}: {exc}") from exc
    return cams


def save_cameras(path, cams: list[Camera]) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cams], fh, indent=1)


def neus_to_camera(K: np.ndarray, c2w: np.ndarray, width: int, height: int) -> Camera:
    """Convert a 3x3 intrinsic matrix and 4x4 camera-to-world pose (OpenCV axes)."""
    rot = np.asarray(c2w)[:3, :3].T
    return Camera(K[0, 0], K[1, 1], K[0, 2], K[1, 2], rot, -rot @ np.asarray(c2w)[:3, 3], width, height)


def load_image(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """8-bit RGB(A) PNG to floats in [0, 1]; alpha comes back as the mask."""
    with Image.open(path) as img:
        if img.mode not in ("RGB", "RGBA", "L", "LA", "P"):
            raise ValueError(f"{path}: unsupported image mode {img.mode} (need 8-bit RGB/RGBA)")
        if img.mode in ("L", "LA", "P"):
            img = img.convert("RGBA" if "A" in img.mode or "transparency" in img.info else "RGB")
        arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise ValueError(f"{path}: unsupported bit depth {arr.dtype}")
    rgb = arr[..., :3].astype(np.float64) / 255.0
    mask = arr[..., 3].astype(np.float64) / 255.0 if arr.shape[-1] == 4 else None
    return rgb, mask


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, rgb: np.ndarray, mask: Optional[np.ndarray] = None) -> None:
    data = to_uint8(rgb)
    if mask is not None:
        data = np.concatenate([data, to_uint8(mask)[..., None]], axis=-1)
    Image.fromarray(data).save(path)


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_rays: int = 256
    views_per_batch: int = 4
    lr_peak: float = 2e-4
    lr_final: float = 1e-5
    warmup: int = 5000
    decay: str = "cosine"
    family: str = "rational"
    normal_k: int = 3
    inverse_normal_weights: bool = False
    color_placement: str = "left"
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    use_mask: bool = True
    log_every: int = 100
    checkpoint_every: int = 0
    dtype: str = "float32"


@dataclass
class RunConfig:
    data_dir: str = "data"
    output_dir: str = "run"
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)


def _to_doc(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_doc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_doc(v) for v in obj]
    return obj


def _from_doc(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key '{sorted(unknown)[0]}'")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_doc(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            kwargs[name] = type(default)(value) if isinstance(default, float) else value
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_doc(cfg)


def config_from_dict(doc: dict) -> RunConfig:
    return _from_doc(RunConfig, doc, "config")


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)


def load_config(path) -> RunConfig:
    with open(Path(path)) as fh:
        return config_from_dict(json.load(fh))
