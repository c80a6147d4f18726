"""Analytic primitive scenes rendered by dense ray marching (ground truth for tests)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .geometry import Camera, PointCloud, RayBundle, camera_rays, estimate_scene_bounds, orbit_poses
from .io import Dataset

KINDS = ("sphere", "box", "plate")


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple
    size: tuple  # sphere: (radius,), box/plate: full side lengths (sx, sy, sz)
    color: tuple = (0.8, 0.2, 0.2)
    density: float = 200.0
    softness: float = 0.0  # >0 gives a logistic density falloff of this width
    checker: float = 0.0  # plate checker cell size (0 = plain)
    color2: tuple = (0.05, 0.05, 0.05)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SceneSpecError(f"primitives.kind: unknown primitive {self.kind!r}")
        if len(self.center) != 3:
            raise SceneSpecError("primitives.center: need three coordinates")
        want = 1 if self.kind == "sphere" else 3
        if len(self.size) != want or min(self.size) <= 0:
            raise SceneSpecError(f"primitives.size: {self.kind} needs {want} positive value(s)")
        if self.density < 0:
            raise SceneSpecError("primitives.density: must be non-negative")
        if len(self.color) != 3 or len(self.color2) != 3:
            raise SceneSpecError("primitives.color: need RGB triples")

    def signed_distance(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        half = 0.5 * np.asarray(self.size)
        d = np.abs(q) - half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside

    def density_at(self, p: np.ndarray) -> np.ndarray:
        sd = self.signed_distance(p)
        if self.softness > 0:
            return self.density * expit(-sd / self.softness)
        return np.where(sd < 0, self.density, 0.0)

    def color_at(self, p: np.ndarray) -> np.ndarray:
        c = np.broadcast_to(np.asarray(self.color, dtype=np.float64), p.shape).copy()
        if self.kind == "plate" and self.checker > 0:
            q = p - np.asarray(self.center)
            parity = (np.floor(q[..., 0] / self.checker) + np.floor(q[..., 1] / self.checker)) % 2 == 1
            c[parity] = self.color2
        return c

    def aabb(self):
        pad = 12.0 * self.softness
        half = np.full(3, self.size[0]) if self.kind == "sphere" else 0.5 * np.asarray(self.size)
        c = np.asarray(self.center, dtype=np.float64)
        return c - half - pad, c + half + pad

    def area(self) -> float:
        if self.kind == "sphere":
            return 4 * np.pi * self.size[0] ** 2
        sx, sy, sz = self.size
        return 2 * (sx * sy + sy * sz + sx * sz)

    def sample_surface(self, n: int, rng) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return c + self.size[0] * v
        size = np.asarray(self.size, dtype=np.float64)
        face_areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
        axis = rng.choice(3, size=n, p=face_areas / face_areas.sum())
        pts = (rng.random((n, 3)) - 0.5) * size
        sign = rng.choice([-0.5, 0.5], size=n)
        pts[np.arange(n), axis] = sign * size[axis]
        return c + pts


@dataclass(frozen=True)
class OrbitSpec:
    count: int = 20
    radius: float = 4.0
    elevation: tuple = (30.0,)
    resolution: tuple = (64, 64)
    fov_deg: float = 40.0
    target: tuple = (0.0, 0.0, 0.0)
    azimuth_offset: float = 0.0

    def __post_init__(self):
        if self.count < 1:
            raise SceneSpecError("cameras.count: must be >= 1")
        if self.radius <= 0:
            raise SceneSpecError("cameras.radius: must be positive")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise SceneSpecError("cameras.resolution: need [width, height]")
        if not 0 < self.fov_deg < 180:
            raise SceneSpecError("cameras.fov_deg: must lie in (0, 180)")
        object.__setattr__(self, "elevation", tuple(np.atleast_1d(self.elevation).astype(float)))


@dataclass(frozen=True)
class SceneSpec:
    primitives: Sequence[Primitive]
    cameras: OrbitSpec = field(default_factory=OrbitSpec)
    background: tuple = (1.0, 1.0, 1.0)
    steps: int = 1024
    gt_points: int = 20000
    seed: int = 0

    def __post_init__(self):
        if not self.primitives:
            raise SceneSpecError("primitives: scene spec names no primitives")
        if self.steps < 1024:
            raise SceneSpecError("steps: reference marching needs at least 1024 steps")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            prims = [Primitive(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in p.items()})
                     for p in d.get("primitives", [])]
        except TypeError as exc:
            raise SceneSpecError(f"primitives: {exc}") from None
        try:
            cams = OrbitSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.get("cameras", {}).items()})
        except TypeError as exc:
            raise SceneSpecError(f"cameras: {exc}") from None
        extra = {k: d[k] for k in ("steps", "gt_points", "seed") if k in d}
        if "background" in d:
            extra["background"] = tuple(d["background"])
        unknown = set(d) - {"primitives", "cameras", "steps", "gt_points", "seed", "background"}
        if unknown:
            raise SceneSpecError(f"{sorted(unknown)[0]}: unknown scene field")
        return cls(prims, cams, **extra)


class AnalyticField:
    """Exact density/colour of a primitive set; overlapping densities add."""

    head = "density"

    def __init__(self, primitives: Sequence[Primitive]):
        self.primitives = tuple(primitives)

    def evaluate(self, points, dirs=None, need_color=True):
        p = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(p.shape[:-1])
        csum = np.zeros(p.shape)
        for prim in self.primitives:
            s = prim.density_at(p)
            sigma += s
            if need_color:
                csum += s[..., None] * prim.color_at(p)
        if not need_color:
            return sigma, None
        color = np.where(sigma[..., None] > 0, csum / np.maximum(sigma, 1e-300)[..., None], 0.0)
        return sigma, color

    def signed_distance(self, points) -> np.ndarray:
        return np.min([prim.signed_distance(points) for prim in self.primitives], axis=0)

    def aabb(self):
        boxes = [prim.aabb() for prim in self.primitives if prim.density > 0]
        if not boxes:
            return None
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    def render_rays(self, rays: RayBundle, steps: int = 1024, background=(1.0, 1.0, 1.0), chunk: int = 2048):
        """Midpoint-rule marching over each ray's overlap with the primitives' bounding box."""
        bg = np.asarray(background, dtype=np.float64)
        n = len(rays)
        color = np.broadcast_to(bg, (n, 3)).copy()
        depth = np.zeros(n)
        box = self.aabb()
        if box is None:
            return color, depth
        lo, hi = box
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rays.directions
            t0 = (lo - rays.origins) * inv
            t1 = (hi - rays.origins) * inv
        tmin = np.nanmax(np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)), axis=1)
        tmax = np.nanmin(np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)), axis=1)
        tmin = np.maximum(tmin, 0.0)
        hit = np.flatnonzero(tmax > tmin)
        u = (np.arange(steps) + 0.5) / steps
        for start in range(0, len(hit), chunk):
            idx = hit[start : start + chunk]
            a, b = tmin[idx], tmax[idx]
            delta = (b - a) / steps
            t = a[:, None] + (b - a)[:, None] * u
            pts = rays.origins[idx, None, :] + t[..., None] * rays.directions[idx, None, :]
            sigma, c = self.evaluate(pts)
            tau = sigma * delta[:, None]
            T = np.exp(-(np.cumsum(tau, axis=1) - tau))
            w = T * -np.expm1(-tau)
            acc = w.sum(axis=1)
            color[idx] = np.einsum("rs,rsc->rc", w, c) + (1 - acc)[:, None] * bg
            depth[idx] = (w * t).sum(axis=1) / np.maximum(acc, 1e-10)
        return color, depth

    def surface_cloud(self, n: int, rng) -> PointCloud:
        prims = [p for p in self.primitives if p.density > 0]
        areas = np.array([p.area() for p in prims])
        counts = np.floor(n * areas / areas.sum()).astype(int)
        counts[: n - counts.sum()] += 1
        pts, cols = [], []
        for prim, k in zip(prims, counts):
            q = prim.sample_surface(int(k), rng)
            pts.append(q)
            cols.append(prim.color_at(q))
        return PointCloud(np.concatenate(pts), np.concatenate(cols))


@dataclass
class SyntheticScene:
    dataset: Dataset
    field: AnalyticField
    ground_truth: PointCloud
    spec: SceneSpec


def orbit_cameras(orbit: OrbitSpec) -> list:
    w, h = orbit.resolution
    poses = orbit_poses(orbit.count, orbit.radius, orbit.elevation, orbit.target, orbit.azimuth_offset)
    return [Camera.from_fov(int(w), int(h), np.deg2rad(orbit.fov_deg), pose) for pose in poses]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic_scene(spec: SceneSpec) -> SyntheticScene:
    field = AnalyticField(spec.primitives)
    cameras = orbit_cameras(spec.cameras)
    bounds = estimate_scene_bounds(cameras) if len(cameras) > 1 else None
    images = []
    for cam in cameras:
        rays = camera_rays(cam, bounds) if bounds is not None else _unbounded_rays(cam)
        color, _ = field.render_rays(rays, spec.steps, spec.background)
        images.append(to_uint8(color.reshape(cam.height, cam.width, 3)))
    rng = np.random.default_rng(spec.seed)
    gt = field.surface_cloud(spec.gt_points, rng) if any(p.density > 0 for p in spec.primitives) else PointCloud(np.zeros((0, 3)))
    return SyntheticScene(Dataset(cameras, images, field), field, gt, spec)


def _unbounded_rays(cam: Camera) -> RayBundle:
    dirs = cam.pixel_directions(cam.pixel_centers())
    origins = np.broadcast_to(cam.position, dirs.shape).copy()
    return RayBundle(origins, dirs, np.zeros(len(dirs)), np.full(len(dirs), np.inf))
