"""Rigid point-cloud alignment: nearest neighbours, Kabsch, ICP and multi-scan fusion."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import PointCloud

ORTHO_TOL = 1e-9


class RegistrationError(ValueError):
    pass


class DegenerateCorrespondenceError(RegistrationError):
    pass


class NoOverlapError(RegistrationError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_pose(cls, pose) -> "RigidTransform":
        """``[x, y, z, Rx, Ry, Rz]``: translation plus extrinsic XYZ Euler angles in degrees."""
        pose = np.asarray(pose, dtype=np.float64)
        if pose.shape != (6,):
            raise ValueError("pose must be [x, y, z, Rx, Ry, Rz]")
        R = Rotation.from_euler("xyz", pose[3:], degrees=True).as_matrix()
        return cls(_orthonormalize(R), pose[:3])

    def to_pose(self) -> list:
        angles = Rotation.from_matrix(self.rotation).as_euler("xyz", degrees=True)
        return [*map(float, self.translation), *map(float, angles)]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other`` (apply ``other`` first)."""
        R = _orthonormalize(self.rotation @ other.rotation)
        return RigidTransform(R, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def rotation_angle_deg(self) -> float:
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))


def _orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _points(x) -> np.ndarray:
    return np.asarray(getattr(x, "points", x), dtype=np.float64).reshape(-1, 3)


def cloud_extent(points) -> float:
    p = _points(points)
    return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0))) if len(p) else 0.0


# nearest neighbours -------------------------------------------------------------


class NeighborIndex:
    """Exact Euclidean nearest-neighbour queries over a fixed target cloud."""

    def __init__(self, target):
        pts = _points(target)
        if len(pts) == 0:
            raise RegistrationError("empty target cloud")
        self.points = pts
        self.tree = cKDTree(pts)

    def query(self, q):
        d, i = self.tree.query(np.asarray(q, dtype=np.float64), k=1)
        return i, d


def nearest_neighbor(index: NeighborIndex, query):
    """(index, distance) of the closest target point; vectorised over (..., 3) queries."""
    return index.query(query)


# closed-form alignment ----------------------------------------------------------


def best_fit_transform(a, b) -> RigidTransform:
    """Least-squares rigid transform T with T(a_i) ≈ b_i (centroids + SVD, reflection-corrected)."""
    a = _points(a)
    b = _points(b)
    if len(a) != len(b):
        raise RegistrationError(f"{len(a)} source points vs {len(b)} target points")
    if len(a) < 3:
        raise DegenerateCorrespondenceError("degenerate correspondence set: need at least 3 pairs")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    H = (a - ca).T @ (b - cb)
    U, s, Vt = np.linalg.svd(H)
    if not s[0] > 0 or s[1] < 1e-12 * s[0]:
        raise DegenerateCorrespondenceError("degenerate correspondence set: points are collinear or coincident")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T
    R = _orthonormalize(R)
    return RigidTransform(R, cb - R @ ca)


def pair_residual(a, b, T: RigidTransform) -> float:
    return float(np.sqrt(np.mean(np.sum((T.apply(_points(a)) - _points(b)) ** 2, axis=1))))


# ICP ------------------------------------------------------------------------------


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-6  # RMS change, fraction of target extent
    max_distance: float = 0.1  # correspondence gate, fraction of target extent
    trim: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.tolerance <= 0 or self.max_distance <= 0:
            raise ValueError("ICP thresholds must be positive")
        if not 0.0 <= self.trim <= 0.5:
            raise ValueError("trim fraction must lie in [0, 0.5]")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    history: tuple  # RMS residual before the first update, then after each update
    converged: bool
    correspondences: int
    iterations: int

    @property
    def rms(self) -> float:
        return self.history[-1]


class _Matcher:
    """Gated, trimmed correspondences and the capped residual they imply.

    The residual is sqrt(mean of the m smallest min(d^2, gate^2)), with m fixed by the trim
    fraction. Capping keeps the cost defined over a fixed number of points, so each
    correspondence/alignment round can only lower it.
    """

    def __init__(self, target, gate, trim, n_source):
        self.index = NeighborIndex(target)
        self.gate = gate
        self.m = max(1, int(np.ceil((1.0 - trim) * n_source)))

    def __call__(self, pts):
        idx, d = self.index.query(pts)
        capped = np.minimum(d, self.gate) ** 2
        order = np.argsort(capped, kind="stable")[: self.m]
        rms = float(np.sqrt(capped[order].sum() / self.m))
        keep = order[d[order] <= self.gate]
        return keep, idx[keep], rms


def icp(source, target, cfg: IcpConfig | None = None, initial: RigidTransform | None = None) -> IcpResult:
    """Point-to-point ICP; the returned transform maps ``source`` into the ``target`` frame."""
    cfg = cfg or IcpConfig()
    src = _points(source)
    tgt = _points(target)
    if len(src) < 3 or len(tgt) < 3:
        raise RegistrationError("ICP needs at least 3 points in each cloud")
    extent = cloud_extent(tgt) or 1.0
    T = initial or RigidTransform.identity()
    match = _Matcher(tgt, cfg.max_distance * extent, cfg.trim, len(src))
    keep, nn, rms = match(T.apply(src))
    if len(keep) == 0:
        raise NoOverlapError("no overlap: no correspondences within the gate distance")
    history = [rms]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        cur = T.apply(src)
        if len(keep) < 3:
            raise NoOverlapError(f"no overlap: only {len(keep)} correspondences within the gate distance")
        step = best_fit_transform(cur[keep], tgt[nn])
        cand = step.compose(T)
        c_keep, c_nn, new_rms = match(cand.apply(src))
        if new_rms > rms:
            # only round-off can raise the capped residual; keep the better pose
            history.append(rms)
            converged = True
            break
        if len(c_keep) == 0:
            raise NoOverlapError("no overlap: correspondences vanished after an update")
        T, keep, nn = cand, c_keep, c_nn
        history.append(new_rms)
        if abs(rms - new_rms) < cfg.tolerance * extent:
            converged = True
            break
        rms = new_rms
    return IcpResult(T, tuple(history), converged, int(len(keep)), it)


# fusion ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanReport:
    index: int
    rms: float
    iterations: int
    converged: bool


def voxel_dedup(cloud: PointCloud, voxel: float) -> PointCloud:
    """Keep the first point that falls in each voxel (input order preserved)."""
    if len(cloud) == 0 or voxel <= 0:
        return cloud
    keys = np.floor((cloud.points - cloud.points.min(axis=0)) / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return cloud.subset(np.sort(first))


def fuse_scans(clouds, poses=None, cfg: IcpConfig | None = None, voxel_fraction: float = 0.0025):
    """Register each scan onto the growing model and merge.

    Returns (merged cloud, per-scan transforms, per-scan reports). ``poses`` seed each scan
    (already in the common frame); scan 0 anchors the model.
    """
    cfg = cfg or IcpConfig()
    clouds = list(clouds)
    if len(clouds) < 2:
        raise RegistrationError("fusion needs at least two scans")
    if poses is not None and len(poses) != len(clouds):
        raise RegistrationError(f"{len(poses)} poses for {len(clouds)} scans")
    seeds = [RigidTransform.identity() if poses is None else _as_transform(p) for p in poses or clouds]
    transforms = [seeds[0]]
    reports = [ScanReport(0, 0.0, 0, True)]
    parts = [clouds[0].transformed(seeds[0].rotation, seeds[0].translation)]
    model = parts[0].points
    for i in range(1, len(clouds)):
        if cfg.max_iterations == 0:
            T, rep = seeds[i], ScanReport(i, float("nan"), 0, False)
        else:
            try:
                res = icp(clouds[i], model, cfg, seeds[i])
            except RegistrationError as exc:
                raise type(exc)(f"scan {i}: {exc}") from None
            T, rep = res.transform, ScanReport(i, res.rms, res.iterations, res.converged)
        transforms.append(T)
        reports.append(rep)
        parts.append(clouds[i].transformed(T.rotation, T.translation))
        model = np.concatenate([model, parts[-1].points])
    merged = PointCloud.concatenate(parts)
    merged = voxel_dedup(merged, voxel_fraction * merged.extent)
    return merged, transforms, reports


def _as_transform(p) -> RigidTransform:
    if isinstance(p, RigidTransform):
        return p
    p = np.asarray(p, dtype=np.float64)
    if p.shape == (4, 4):
        return RigidTransform.from_matrix(p)
    return RigidTransform.from_pose(p)


def load_scan_manifest(path):
    """JSON list of {ply_path, pose: [x, y, z, Rx, Ry, Rz]} -> (clouds, transforms)."""
    from .io import load_ply

    path = Path(path)
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not entries:
        raise RegistrationError("scan manifest must be a non-empty JSON list")
    clouds, poses = [], []
    for i, e in enumerate(entries):
        if "ply_path" not in e:
            raise RegistrationError(f"scan {i}: manifest entry lacks ply_path")
        ply = Path(e["ply_path"])
        clouds.append(load_ply(ply if ply.is_absolute() else path.parent / ply))
        poses.append(RigidTransform.from_pose(e["pose"]) if "pose" in e else RigidTransform.identity())
    return clouds, poses


def write_fusion_report(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scan", "rms", "iterations", "converged"])
        for r in reports:
            w.writerow([r.index, repr(r.rms), r.iterations, int(r.converged)])
