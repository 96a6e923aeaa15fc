"""Surface point extraction, Chamfer distance and the weight-bias lab."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .fields import AnalyticScene, DistanceField, Ray, project_to_surface
from .rendering import DensityFamily, RaySampleSet, alpha_compose, naive_neus_weights, point_weights, sigma_r


class DegenerateFieldError(RuntimeError):
    pass


@dataclass
class SurfacePointCloud:
    points: np.ndarray
    residual: np.ndarray
    eps: float
    n_seeds: int

    @property
    def retention(self) -> float:
        return len(self.points) / self.n_seeds


class NeuralField:
    """numpy ``eval`` adapter around a UDF network."""

    def __init__(self, net, chunk: int = 65536):
        self.net = net
        self.chunk = chunk
        self.dtype = next(net.parameters()).dtype

    def eval(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        ds, gs = [], []
        for i in range(0, len(x), self.chunk):
            pts = torch.from_numpy(x[i : i + self.chunk]).to(self.dtype)
            d, _, g = self.net.with_gradient(pts, create_graph=False)
            ds.append(d.detach().double().numpy())
            gs.append(g.detach().double().numpy())
        return np.concatenate(ds), np.concatenate(gs)


def sample_ball(n: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius * rng.random(n)[:, None] ** (1 / 3)


def extract_surface_points(
    field: DistanceField,
    n: int = 100_000,
    eps: float = 1e-3,
    iters: int = 8,
    seed: int = 0,
    radius: float = 1.0,
    min_retention: float = 0.01,
) -> SurfacePointCloud:
    """Project random seeds in the ball onto the zero level set and mask.

    Points ending with residual ``>= eps`` or more than ``eps`` outside the ball are dropped.
    """
    if n < 1:
        raise ValueError("need at least one seed")
    rng = np.random.default_rng(seed)
    proj = project_to_surface(field, sample_ball(n, rng, radius), iters=iters)
    keep = (proj.residual < eps) & (np.linalg.norm(proj.points, axis=1) <= radius + eps)
    cloud = SurfacePointCloud(proj.points[keep], proj.residual[keep], eps, n)
    if cloud.retention < min_retention:
        raise DegenerateFieldError(
            f"only {keep.sum()} of {n} seeds reached the zero level set (eps={eps})"
        )
    return cloud


def sample_scene_surface(scene: AnalyticScene, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the scene's primitives."""
    from .fields import Disk, Rectangle, Sphere, _plane_basis, _unit

    rng = np.random.default_rng(seed)
    areas = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            areas.append(4 * math.pi * p.radius**2)
        elif isinstance(p, Disk):
            areas.append(math.pi * p.radius**2)
        else:
            areas.append(4 * p.half_extents[0] * p.half_extents[1])
    counts = rng.multinomial(n, np.array(areas) / sum(areas))
    out = []
    for p, m in zip(scene.primitives, counts):
        c = np.asarray(p.center, dtype=np.float64)
        if isinstance(p, Sphere):
            v = rng.normal(size=(m, 3))
            out.append(c + p.radius * v / np.linalg.norm(v, axis=1, keepdims=True))
            continue
        u, w = _plane_basis(_unit(p.normal))
        if isinstance(p, Disk):
            rho = p.radius * np.sqrt(rng.random(m))
            phi = 2 * math.pi * rng.random(m)
            a, b = rho * np.cos(phi), rho * np.sin(phi)
        else:
            a = rng.uniform(-p.half_extents[0], p.half_extents[0], m)
            b = rng.uniform(-p.half_extents[1], p.half_extents[1], m)
        out.append(c + a[:, None] * u + b[:, None] * w)
    return np.concatenate(out)


def normalize_to_unit_sphere(reference: np.ndarray, *others: np.ndarray):
    """Map ``reference`` into the unit sphere and apply the same map to ``others``.

    Centre is the bounding-box centre, scale the largest distance to it.
    """
    lo, hi = reference.min(0), reference.max(0)
    center = 0.5 * (lo + hi)
    scale = np.linalg.norm(reference - center, axis=1).max()
    if scale == 0:
        raise ValueError("reference cloud is a single point")
    return [(c - center) / scale for c in (reference, *others)], (center, scale)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean squared NN distance a->b plus b->a."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Chamfer distance needs two non-empty clouds")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da**2) + np.mean(db**2))


def scene_chamfer(points: np.ndarray, scene: AnalyticScene, n_ref: int = 100_000, seed: int = 0) -> float:
    """Chamfer against area-uniform scene samples, both mapped by the scene's unit-sphere normalisation."""
    ref = sample_scene_surface(scene, n_ref, seed)
    (ref_n, pts_n), _ = normalize_to_unit_sphere(ref, points)
    return chamfer(pts_n, ref_n)


def write_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        for p in points:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_ply(path) -> np.ndarray:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        props = []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                count = int(parts[2])
            elif parts[0] == "property" and count is not None:
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        if count is None or props[:3] != ["x", "y", "z"]:
            raise ValueError(f"{path}: missing vertex x y z properties")
        rows = [fh.readline().split() for _ in range(count)]
    return np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float64).reshape(-1, 3)


@dataclass
class BiasReport:
    scene: str
    renderer: str
    parameter: str
    values: list[float]
    rows: list[dict]
    checks: dict[str, bool] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.checks = {k: bool(v) for k, v in self.checks.items()}
        self.rows = [{k: float(v) if isinstance(v, np.floating) else v for k, v in r.items()} for r in self.rows]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> str:
        doc = asdict(self)
        doc["passed"] = self.passed
        return json.dumps(doc, indent=2)

    def to_text(self) -> str:
        keys = [k for k in self.rows[0] if k != self.parameter] if self.rows else []
        lines = [f"# {self.renderer} weights on {self.scene}, sweep over {self.parameter}"]
        lines.append("\t".join([self.parameter] + keys))
        for row in self.rows:
            lines.append("\t".join([f"{row[self.parameter]:g}"] + [f"{row[k]:.6f}" for k in keys]))
        for name, ok in self.checks.items():
            lines.append(f"check {name}: {'pass' if ok else 'FAIL'}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def _nodes(ray: Ray, n: int, breakpoints: Sequence[float]) -> tuple[np.ndarray, list[int]]:
    """Uniform grid over the ray bounds merged with ``breakpoints``, ``n`` nodes total."""
    bps = sorted({float(b) for b in breakpoints if ray.t_near < b < ray.t_far})
    grid = np.linspace(ray.t_near, ray.t_far, n - len(bps))
    t = np.union1d(grid, bps)
    return t, [int(np.searchsorted(t, b)) for b in bps]


def _ray_breakpoints(scene: AnalyticScene, ray: Ray, delta: float):
    hits = scene.hits(ray)
    if not hits:
        raise ValueError("ray has no oracle intersection")
    left = [t - delta / abs(cos) for t, cos, _ in hits]
    return hits, left


def verify_naive_bias(
    scene: AnalyticScene,
    ray: Ray,
    s_values: Sequence[float] = (1e2, 1e3, 1e4),
    n: int = 2**14,
    delta: float = 0.01,
    tol_before: float = 0.02,
    tol_first: float = 0.02,
    tol_cascade: float = 0.03,
) -> BiasReport:
    """Cumulative sigmoid-renderer weight around each oracle intersection.

    ``t_k^l`` is placed ``delta`` away from ``t_k*`` in distance units.
    Intersections and left points are quadrature nodes so cumulative masses
    are read off the transmittance exactly.
    """
    hits, left = _ray_breakpoints(scene, ray, delta)
    t, _ = _nodes(ray, n, [h[0] for h in hits] + left)
    psi = torch.from_numpy(scene.eval(ray.at(t))[0])
    i_left = [int(np.searchsorted(t, x)) for x in left]
    i_hit = [int(np.searchsorted(t, h[0])) for h in hits]
    rows = []
    for s in s_values:
        trans = naive_neus_weights(psi, s).trans.numpy()
        row = {"s": float(s), "before_t0l": 1 - trans[i_left[0]]}
        for k, i in enumerate(i_hit):
            row[f"through_t{k}"] = 1 - trans[i]
            row[f"beyond_t{k}"] = trans[i]
        rows.append(row)
    last = rows[-1]
    checks = {
        "before_first_vanishes": last["before_t0l"] < tol_before,
        "first_surface_half": abs(last["through_t0"] - 0.5) <= tol_first,
    }
    for k in range(1, len(hits)):
        checks[f"cascade_beyond_t{k}"] = abs(last[f"beyond_t{k}"] - 0.5 ** (k + 1)) <= tol_cascade
    return BiasReport(scene.name, "naive-sigmoid", "s", [float(s) for s in s_values], rows, checks,
                      notes=[f"{len(t)} nodes, delta={delta}"])


def random_transversal_ray(scene: AnalyticScene, rng: np.random.Generator, min_hits: int = 1,
                           max_angle: float = math.radians(30), offset: float = 2.5) -> Ray:
    """A ray through the first primitive's interior within ``max_angle`` of its normal."""
    from .fields import Disk, Rectangle, _plane_basis, _unit
    from .sampling import sphere_clip

    prim = scene.primitives[0]
    if not isinstance(prim, (Disk, Rectangle)):
        raise ValueError("transversal rays need a planar first primitive")
    n = _unit(prim.normal)
    u, w = _plane_basis(n)
    for _ in range(10_000):
        extent = 0.3 * (prim.radius if isinstance(prim, Disk) else min(prim.half_extents))
        a, b = rng.uniform(-extent, extent, 2)
        p0 = np.asarray(prim.center) + a * u + b * w
        theta = max_angle * math.sqrt(rng.random())
        phi = 2 * math.pi * rng.random()
        v = math.cos(theta) * n + math.sin(theta) * (math.cos(phi) * u + math.sin(phi) * w)
        if rng.random() < 0.5 and min_hits < 2:
            v = -v
        v /= np.linalg.norm(v)
        o = p0 - offset * v
        near, far, hit = sphere_clip(torch.tensor(o)[None], torch.tensor(v)[None])
        if not bool(hit[0]):
            continue
        ray = Ray(o, v, float(near[0]), float(far[0]))
        hits = scene.hits(ray)
        if len(hits) >= min_hits and hits[0][2] == 0:
            return ray
    raise RuntimeError("could not find a transversal ray")


def neudf_ray_checks(
    scene: AnalyticScene,
    ray: Ray,
    r: float,
    family: str = "rational",
    delta: float = 0.01,
    n: int = 2**14,
    perturbation: float = 0.0,
) -> dict:
    """Concentration, argmax and occlusion quantities for one ray.

    ``perturbation`` adds a constant to the field so the zero set is encoded
    as a small positive value.
    """
    fam = DensityFamily(family, r)
    hits, left = _ray_breakpoints(scene, ray, delta)
    t, _ = _nodes(ray, n, [h[0] for h in hits] + left)
    psi = torch.from_numpy(scene.eval(ray.at(t))[0] + perturbation)
    trans = alpha_compose(psi, fam).trans.numpy()
    masses = []
    for (th, _, _), tl in zip(hits, left):
        masses.append(trans[int(np.searchsorted(t, tl))] - trans[int(np.searchsorted(t, th))])
    psi_start = float(psi[0])
    sig = lambda d: float(sigma_r(fam, torch.tensor(d, dtype=torch.float64)))
    predicted = (sig(delta + perturbation) - sig(perturbation)) / sig(psi_start)

    # argmax uses the plain uniform grid; a node exactly on t* has no density
    tu = np.linspace(ray.t_near, ray.t_far, n)
    d, g = scene.eval(ray.at(tu))
    samples = RaySampleSet(
        t=torch.from_numpy(tu),
        psi=torch.from_numpy(d + perturbation),
        origins=torch.from_numpy(ray.o),
        dirs=torch.from_numpy(ray.v),
        grad=torch.from_numpy(g),
    )
    w = point_weights(samples, fam).numpy()
    nearest = int(np.argmin(np.abs(tu - hits[0][0])))
    return {
        "r": float(r),
        "delta_mass": masses,
        "predicted_first_mass": predicted,
        "argmax": int(np.argmax(w)),
        "nearest": nearest,
    }


def verify_neudf(
    scene: AnalyticScene,
    ray: Ray,
    r_values: Sequence[float] = (10.0, 1e2, 1e3, 1e4),
    family: str = "rational",
    delta: float = 0.01,
    n: int = 2**14,
    min_mass: float = 0.98,
    perturbation: float = 0.0,
) -> BiasReport:
    """Concentration at the first hit, unbiased argmax and occlusion order."""
    rows, checks = [], {}
    argmax_ok = occl_ok = True
    for r in r_values:
        q = neudf_ray_checks(scene, ray, r, family, delta, n, perturbation)
        row = {"r": q["r"], "predicted_first_mass": q["predicted_first_mass"]}
        for k, m in enumerate(q["delta_mass"]):
            row[f"delta_mass_t{k}"] = m
        row["argmax_offset"] = q["argmax"] - q["nearest"]
        rows.append(row)
        argmax_ok &= q["argmax"] == q["nearest"]
        if len(q["delta_mass"]) > 1:
            occl_ok &= q["delta_mass"][0] > q["delta_mass"][1]
    checks["first_mass_concentrated"] = rows[-1]["delta_mass_t0"] >= min_mass
    checks["argmax_at_nearest_sample"] = bool(argmax_ok)
    if len(scene.hits(ray)) > 1:
        checks["occlusion_order"] = bool(occl_ok)
    return BiasReport(scene.name, f"udf-{family}", "r", [float(r) for r in r_values], rows, checks,
                      notes=[f"delta={delta}, perturbation={perturbation}"])
