"""Calibration-plate scale recovery, colour-gated clustering and height/width measurement."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .geometry import PointCloud


class PlateNotFoundError(ValueError):
    pass


class DegenerateClusterError(ValueError):
    pass


def invariant_extent(points: np.ndarray) -> float:
    """Twice the largest distance from the centroid (unchanged by rigid motion)."""
    if len(points) == 0:
        return 0.0
    return 2.0 * float(np.sqrt(np.max(np.sum((points - points.mean(axis=0)) ** 2, axis=1))))


# calibration plate -----------------------------------------------------------


@dataclass(frozen=True)
class PlateConfig:
    threshold: float = 0.005  # inlier distance, fraction of cloud extent
    iterations: int = 500
    min_inliers: int = 50
    min_inlier_fraction: float = 0.05
    percentiles: tuple = (1.0, 99.0)
    isolation: float = 3.0  # in-plane k-NN distance cut, multiple of the median
    seed: int = 0


@dataclass(frozen=True)
class CalibrationPlate:
    normal: np.ndarray
    offset: float  # plane: normal . p = offset
    center: np.ndarray
    axes: np.ndarray  # (2, 3) in-plane unit axes, longer side first
    sides: tuple  # (long, short) in model units
    inliers: np.ndarray

    @property
    def marker_length(self) -> float:
        return float(sum(self.sides))


def _plane_basis(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _rectangle_axes(q: np.ndarray) -> np.ndarray:
    """In-plane axes of the minimum-area bounding rectangle (hull edge directions).

    Principal axes wobble by about a degree on randomly sampled near-square plates, which
    leaks the long side into the short one; the hull rectangle does not.
    """
    try:
        hull = q[ConvexHull(q).vertices]
    except QhullError:
        return np.eye(2)
    edges = np.roll(hull, -1, axis=0) - hull
    ang = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    best, best_area = 0.0, np.inf
    for a in ang:
        c, s = np.cos(a), np.sin(a)
        x = hull @ np.array([c, s])
        y = hull @ np.array([-s, c])
        area = (x.max() - x.min()) * (y.max() - y.min())
        if area < best_area:
            best, best_area = a, area
    c, s = np.cos(best), np.sin(best)
    return np.array([[c, s], [-s, c]])


def detect_plate(cloud, cfg: PlateConfig | None = None) -> CalibrationPlate:
    """RANSAC plane, least-squares refit, then the in-plane bounding rectangle.

    Each side is the robust percentile range rescaled to the full width of a uniformly
    covered interval (capped at the observed span), so a clean plate reports its true sides.
    """
    cfg = cfg or PlateConfig()
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    need = max(cfg.min_inliers, int(np.ceil(cfg.min_inlier_fraction * len(pts))), 3)
    if len(pts) < need:
        raise PlateNotFoundError("plate not found: too few points")
    thr = cfg.threshold * invariant_extent(pts)
    rng = np.random.default_rng(cfg.seed)
    best, best_count = None, 0
    for _ in range(cfg.iterations):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm == 0:
            continue
        n /= norm
        count = int(np.count_nonzero(np.abs((pts - a) @ n) <= thr))
        if count > best_count:
            best, best_count = (n, a), count
    if best is None or best_count < need:
        raise PlateNotFoundError(f"plate not found: best plane has {best_count} inliers, need {need}")
    n, a = best
    inl = np.flatnonzero(np.abs((pts - a) @ n) <= thr)
    # least-squares refit on the consensus set
    centroid = pts[inl].mean(axis=0)
    _, _, vt = np.linalg.svd(pts[inl] - centroid, full_matrices=False)
    n = vt[2]
    inl = np.flatnonzero(np.abs((pts - centroid) @ n) <= thr)
    if len(inl) < need:
        raise PlateNotFoundError("plate not found: refit lost the consensus set")
    u, v = _plane_basis(n)
    q = np.stack([pts[inl] @ u, pts[inl] @ v], axis=1)
    # stray points that merely graze the plane are isolated in-plane; drop them
    k = min(5, len(q))
    dk = cKDTree(q).query(q, k=k)[0][:, -1]
    dense = dk <= cfg.isolation * np.median(dk)
    inl, q = inl[dense], q[dense]
    if len(inl) < need:
        raise PlateNotFoundError("plate not found: consensus set is too sparse")
    centroid = pts[inl].mean(axis=0)
    q = q - q.mean(axis=0)
    axes2 = _rectangle_axes(q)
    lo_p, hi_p = cfg.percentiles
    sides, mids = [], []
    for ax in axes2:
        s = q @ ax
        lo, hi = np.percentile(s, [lo_p, hi_p])
        # a lattice-like sample has its extreme rows inside the trimmed tails, so the
        # rescaled range may overshoot; it can never exceed the observed span
        sides.append(min((hi - lo) * 100.0 / (hi_p - lo_p), s.max() - s.min()))
        mids.append(0.5 * (lo + hi))
    axes3 = np.array([ax[0] * u + ax[1] * v for ax in axes2])
    order = np.argsort(sides)[::-1]
    center = centroid + sum(m * ax for m, ax in zip(mids, axes3))
    return CalibrationPlate(n, float(n @ centroid), center, axes3[order], tuple(float(sides[i]) for i in order), inl)


# scale ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleFactor:
    tau: float
    actual_mm: float
    model: float


def scale_factor(actual_mm: float, model_length: float) -> ScaleFactor:
    if not (actual_mm > 0 and model_length > 0):
        raise ValueError("lengths must be positive")
    return ScaleFactor(actual_mm / model_length, float(actual_mm), float(model_length))


def plate_scale(plate: CalibrationPlate, plate_mm) -> ScaleFactor:
    """Scale from a plate of known physical sides: summed physical over summed detected sides."""
    mm = sorted((float(x) for x in plate_mm), reverse=True)
    if len(mm) != 2:
        raise ValueError("plate size needs two side lengths")
    return scale_factor(sum(mm), plate.marker_length)


def apply_scale(cloud: PointCloud, tau) -> PointCloud:
    tau = getattr(tau, "tau", tau)
    if not tau > 0:
        raise ValueError("scale factor must be positive")
    return PointCloud(cloud.points * tau, cloud.colors)


# segmentation ---------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentConfig:
    radius: float = 10.0  # mm
    min_size: int = 10
    hue_bands: tuple | None = None  # ((lo_deg, hi_deg), ...); lo > hi wraps through 0
    min_saturation: float = 0.0
    min_value: float = 0.0


@dataclass
class Segmentation:
    clusters: list  # index arrays into the input cloud, ordered by first member
    labels: np.ndarray  # cluster id per point, -1 = gated out or too small
    gated: np.ndarray  # indices passing the colour gate


def hsv(colors: np.ndarray) -> np.ndarray:
    """(n, 3) RGB in [0, 1] -> (n, 3) HSV with hue in degrees."""
    out = np.array([colorsys.rgb_to_hsv(*c) for c in np.asarray(colors, dtype=np.float64)]).reshape(-1, 3)
    out[:, 0] *= 360.0
    return out


def color_gate(cloud: PointCloud, cfg: SegmentConfig) -> np.ndarray:
    n = len(cloud)
    if cfg.hue_bands is None and cfg.min_saturation <= 0 and cfg.min_value <= 0:
        return np.arange(n)
    if cloud.colors is None:
        raise ValueError("colour gate needs a coloured cloud")
    h = hsv(cloud.colors)
    ok = (h[:, 1] >= cfg.min_saturation) & (h[:, 2] >= cfg.min_value)
    if cfg.hue_bands is not None:
        in_band = np.zeros(n, dtype=bool)
        for lo, hi in cfg.hue_bands:
            in_band |= (h[:, 0] >= lo) & (h[:, 0] <= hi) if lo <= hi else (h[:, 0] >= lo) | (h[:, 0] <= hi)
        ok &= in_band
    return np.flatnonzero(ok)


def _radius_components(pts: np.ndarray, radius: float, chunk: int = 4096) -> np.ndarray:
    """Component id per point for the graph joining points at distance <= radius.

    Points sharing a grid cell of diagonal ``radius`` are always joined, so the graph
    is built between occupied cells; this keeps memory bounded on dense clouds.
    """
    m = len(pts)
    if radius <= 0:
        # only coincident points link
        _, cell = np.unique(pts, axis=0, return_inverse=True)
        return cell.ravel()
    keys = np.floor((pts - pts.min(axis=0)) / (radius / np.sqrt(3.0))).astype(np.int64)
    _, cell = np.unique(keys, axis=0, return_inverse=True)
    cell = cell.ravel()
    ncell = int(cell.max()) + 1
    tree = cKDTree(pts)
    links = []
    for s in range(0, m, chunk):
        nb = tree.query_ball_point(pts[s:s + chunk], radius)
        lens = np.fromiter((len(x) for x in nb), dtype=np.int64, count=len(nb))
        j = cell[np.concatenate(nb).astype(np.int64)]
        i = np.repeat(cell[s:s + chunk], lens)
        keep = i < j
        links.append(np.unique(i[keep] * ncell + j[keep]))
    flat = np.unique(np.concatenate(links)) if links else np.zeros(0, np.int64)
    a, b = flat // ncell, flat % ncell
    graph = coo_matrix((np.ones(len(flat)), (a, b)), shape=(ncell, ncell))
    _, comp = connected_components(graph, directed=False)
    return comp[cell]


def segment_clusters(cloud: PointCloud, cfg: SegmentConfig | None = None) -> Segmentation:
    """Colour gate, then connected components of the graph linking points closer than ``radius``."""
    cfg = cfg or SegmentConfig()
    gated = color_gate(cloud, cfg)
    labels = np.full(len(cloud), -1, dtype=np.int64)
    if len(gated) == 0:
        return Segmentation([], labels, gated)
    pts = cloud.points[gated]
    comp = _radius_components(pts, cfg.radius)
    clusters = []
    # relabel by first member so the output does not depend on the graph library's numbering
    _, first = np.unique(comp, return_index=True)
    for c in comp[np.sort(first)]:
        members = gated[comp == c]
        if len(members) >= cfg.min_size:
            labels[members] = len(clusters)
            clusters.append(members)
    return Segmentation(clusters, labels, gated)


# measurement ----------------------------------------------------------------------


@dataclass(frozen=True)
class MeasureConfig:
    gravity: tuple = (0.0, 0.0, 1.0)
    robust: bool = False
    percentiles: tuple = (0.5, 99.5)


def _range(x, cfg: MeasureConfig) -> float:
    if cfg.robust:
        lo, hi = np.percentile(x, cfg.percentiles)
        return float(hi - lo)
    return float(x.max() - x.min())


def measure(cluster, cfg: MeasureConfig | None = None):
    """(height, width) in the cloud's units.

    Height spans the gravity axis; width is the larger extent along the two principal axes of
    the horizontal projection (x/y when the horizontal spread is isotropic).
    """
    cfg = cfg or MeasureConfig()
    pts = np.asarray(getattr(cluster, "points", cluster), dtype=np.float64).reshape(-1, 3)
    if len(pts) < 10:
        raise DegenerateClusterError(f"cluster has {len(pts)} points, need at least 10")
    if np.all(pts == pts[0]):
        raise DegenerateClusterError("degenerate cluster: all points coincide")
    g = np.asarray(cfg.gravity, dtype=np.float64)
    g /= np.linalg.norm(g)
    height = _range(pts @ g, cfg)
    if abs(g[2]) == 1.0:
        e1, e2 = np.array([1.0, 0.0, 0.0]), np.cross(g, [1.0, 0.0, 0.0])
    else:
        e1, e2 = _plane_basis(g)
    q = np.stack([pts @ e1, pts @ e2], axis=1)
    q -= q.mean(axis=0)
    evals, evecs = np.linalg.eigh(q.T @ q / len(q))
    axes = evecs.T if evals[1] - evals[0] > 1e-6 * (evals[1] + evals[0]) else np.eye(2)
    width = max(_range(q @ ax, cfg) for ax in axes)
    return height, width


def percent_difference(measured, reference) -> float:
    m = np.asarray(measured, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("reference dimensions must be positive")
    return float(np.mean(np.abs(m - r) / r) * 100.0)


@dataclass
class ClusterMeasurement:
    id: int
    n_points: int
    height_cm: float
    width_cm: float
    reference_cm: tuple | None = None
    difference_pct: float | None = None


@dataclass
class MeasurementReport:
    tau: float
    plate_sides_mm: tuple
    clusters: list = field(default_factory=list)

    @property
    def differences_pct(self) -> list:
        return [c.difference_pct for c in self.clusters if c.difference_pct is not None]

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "plate": {"sides_mm": list(self.plate_sides_mm)},
            "clusters": [
                {
                    "id": c.id,
                    "n_points": c.n_points,
                    "height_cm": c.height_cm,
                    "width_cm": c.width_cm,
                    **({"reference_cm": list(c.reference_cm), "difference_pct": c.difference_pct}
                       if c.reference_cm is not None else {}),
                }
                for c in self.clusters
            ],
            "differences_pct": self.differences_pct,
        }


def measure_clusters(cloud_mm: PointCloud, seg: Segmentation, cfg: MeasureConfig | None = None,
                     references=None) -> list:
    """Measure every cluster (mm cloud -> cm); ``references`` pairs with clusters by order."""
    out = []
    for i, members in enumerate(seg.clusters):
        h, w = measure(cloud_mm.points[members], cfg)
        m = ClusterMeasurement(i, int(len(members)), h / 10.0, w / 10.0)
        if references is not None and i < len(references):
            ref = tuple(float(x) for x in references[i])
            m.reference_cm = ref
            m.difference_pct = percent_difference((m.height_cm, m.width_cm), ref)
        out.append(m)
    return out
