"""Pinhole cameras, rays and the axis-aligned scene cube."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-9
MIN_NEAR = 1e-4


class DegenerateRigError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with an OpenGL-style camera-to-world pose (looks along -z)."""

    width: int
    height: int
    focal: float
    cx: float
    cy: float
    pose: np.ndarray = field(repr=False)

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValueError(f"camera pose must be 4x4, got {pose.shape}")
        if not self.focal > 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not np.array_equal(pose[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last pose row must be (0, 0, 0, 1)")
        rot = pose[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL or np.linalg.det(rot) < 0:
            raise ValueError("pose rotation block is not a proper rotation")
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float, pose) -> "Camera":
        focal = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(width, height, float(focal), width / 2.0, height / 2.0, pose)

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3].copy()

    @property
    def optical_axis(self) -> np.ndarray:
        return -self.pose[:3, 2]

    @property
    def fov_x(self) -> float:
        return float(2.0 * np.arctan(0.5 * self.width / self.focal))

    def pixel_directions(self, px: np.ndarray) -> np.ndarray:
        """Unit world-space directions through continuous pixel coordinates (..., 2)."""
        px = np.asarray(px, dtype=np.float64)
        d_cam = np.stack(
            [
                (px[..., 0] - self.cx) / self.focal,
                -(px[..., 1] - self.cy) / self.focal,
                -np.ones(px.shape[:-1]),
            ],
            axis=-1,
        )
        d = d_cam @ self.pose[:3, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to continuous pixel coordinates (..., 2)."""
        rel = np.asarray(points, dtype=np.float64) - self.pose[:3, 3]
        cam = rel @ self.pose[:3, :3]
        depth = -cam[..., 2]
        u = self.cx + self.focal * cam[..., 0] / depth
        v = self.cy - self.focal * cam[..., 1] / depth
        return np.stack([u, v], axis=-1)

    def pixel_centers(self) -> np.ndarray:
        jj, ii = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([ii + 0.5, jj + 0.5], axis=-1).reshape(-1, 2)


@dataclass(frozen=True)
class SceneBounds:
    center: np.ndarray
    half_extent: float

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64).reshape(3)
        if not self.half_extent > 0:
            raise ValueError("half-extent must be positive")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extent", float(self.half_extent))

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extent

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extent

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        """Map the cube onto [-1, 1]^3."""
        return (points - self.center) / self.half_extent


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    @property
    def hit(self) -> bool:
        return self.t_far > self.t_near

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(t, self.direction)


class RayBundle(NamedTuple):
    """Batched rays; rays with ``far <= near`` missed the scene cube."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return len(self.near)

    @property
    def hit(self) -> np.ndarray:
        return self.far > self.near

    def subset(self, idx) -> "RayBundle":
        return RayBundle(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], float(self.near[i]), float(self.far[i]))


def intersect_cube(origins, directions, bounds: SceneBounds):
    """Slab test; returns (near, far) with far == near for misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bounds.lo - origins) * inv
        t1 = (bounds.hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = np.max(tmin, axis=-1)
    far = np.min(tmax, axis=-1)
    near = np.maximum(near, MIN_NEAR)
    miss = ~(far > near)
    near = np.where(miss, 0.0, near)
    far = np.where(miss, 0.0, far)
    return near, far


def camera_rays(camera: Camera, bounds: SceneBounds, px=None) -> RayBundle:
    if px is None:
        px = camera.pixel_centers()
    px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
    dirs = camera.pixel_directions(px)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    near, far = intersect_cube(origins, dirs, bounds)
    return RayBundle(origins, dirs, near, far)


def camera_ray(camera: Camera, px, bounds: SceneBounds) -> Ray:
    px = np.asarray(px, dtype=np.float64)
    if px[0] < 0 or px[1] < 0 or px[0] > camera.width or px[1] > camera.height:
        raise ValueError(f"pixel {tuple(px)} outside image {camera.width}x{camera.height}")
    return camera_rays(camera, bounds, px[None]).ray(0)


def estimate_scene_bounds(cameras, fraction: float = 0.5) -> SceneBounds:
    """Cube centred on the least-squares intersection of the optical axes.

    The half-extent is ``fraction`` of the farthest camera distance.
    """
    if len(cameras) < 2:
        raise DegenerateRigError("degenerate camera rig: need at least two cameras")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        a = cam.optical_axis
        a = a / np.linalg.norm(a)
        P = np.eye(3) - np.outer(a, a)
        A += P
        b += P @ cam.position
    eig = np.linalg.eigvalsh(A)
    if eig[0] < 1e-12 * max(eig[-1], 1.0):
        raise DegenerateRigError("degenerate camera rig: optical axes are parallel")
    center = np.linalg.solve(A, b)
    radius = max(np.linalg.norm(cam.position - center) for cam in cameras)
    return SceneBounds(center, fraction * radius)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` looking at ``target`` (OpenGL axes)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(forward, up)) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    # re-orthonormalise to machine precision
    u, _, vt = np.linalg.svd(pose[:3, :3])
    pose[:3, :3] = u @ vt
    return pose


def orbit_poses(count: int, radius: float, elevations_deg, center=(0.0, 0.0, 0.0), azimuth_offset_deg=0.0):
    elevations = np.atleast_1d(np.asarray(elevations_deg, dtype=np.float64))
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(count):
        az = np.deg2rad(azimuth_offset_deg + 360.0 * i / count)
        el = np.deg2rad(elevations[i % len(elevations)])
        eye = center + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye, center))
    return poses


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(cols) != len(pts):
                raise ValueError(f"{len(cols)} colors for {len(pts)} points")
            object.__setattr__(self, "colors", cols)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], None if self.colors is None else self.colors[idx])

    def transformed(self, rotation, translation) -> "PointCloud":
        return PointCloud(self.points @ np.asarray(rotation).T + translation, self.colors)

    @property
    def extent(self) -> float:
        """Bounding-box diagonal length."""
        if len(self.points) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
        if clouds and all(c.colors is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.colors for c in clouds]))
        return PointCloud(pts)
