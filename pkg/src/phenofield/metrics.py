"""Image and point-cloud quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PsnrResult:
    """PSNR in dB; ``identical`` marks MSE == 0, where no finite value exists."""

    value: float
    mse: float

    @property
    def identical(self) -> bool:
        return self.mse == 0.0

    @property
    def finite(self) -> bool:
        return not self.identical

    def __float__(self):
        return self.value


def _default_max(a) -> float:
    return 255.0 if np.asarray(a).dtype == np.uint8 else 1.0


def psnr(img_a, img_b, max_val: float | None = None) -> PsnrResult:
    a = np.asarray(img_a)
    b = np.asarray(img_b)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    if max_val is None:
        max_val = _default_max(a)
    if max_val <= 0:
        raise MetricError("MAX must be positive")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PsnrResult(float("inf"), 0.0)
    return PsnrResult(float(10.0 * np.log10(max_val**2 / mse)), mse)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("K1 and K2 must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd size")

    def kernel(self) -> np.ndarray:
        x = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()


@dataclass(frozen=True)
class SsimResult:
    score: float
    map: np.ndarray


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    raise MetricError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def _filter(x, k):
    # separable 'valid' Gaussian window
    r = len(k) // 2
    y = correlate1d(x, k, axis=0, mode="constant")[r : x.shape[0] - r]
    return correlate1d(y, k, axis=1, mode="constant")[:, r : x.shape[1] - r]


def ssim(img_a, img_b, cfg: SsimConfig | None = None, max_val: float | None = None) -> SsimResult:
    cfg = cfg or SsimConfig()
    if np.shape(img_a) != np.shape(img_b):
        raise MetricError(f"image shapes differ: {np.shape(img_a)} vs {np.shape(img_b)}")
    if max_val is None:
        max_val = _default_max(img_a)
    x = to_luma(img_a)
    y = to_luma(img_b)
    if min(x.shape) < cfg.window:
        raise MetricError(f"image too small for a {cfg.window}x{cfg.window} window")
    k = cfg.kernel()
    c1 = (cfg.k1 * max_val) ** 2
    c2 = (cfg.k2 * max_val) ** 2
    mx, my = _filter(x, k), _filter(y, k)
    # same expression for variances and covariance so ssim(x, x) == 1 exactly
    sxx = _filter(x * x, k) - mx * mx
    syy = _filter(y * y, k) - my * my
    sxy = _filter(x * y, k) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return SsimResult(float(smap.mean()), smap)


# point clouds -------------------------------------------------------------------


@dataclass(frozen=True)
class CloudDistanceReport:
    mean_ab: float
    mean_ba: float
    chamfer: float
    histogram: np.ndarray  # counts per bin over all directed distances
    bin_edges: np.ndarray

    def to_dict(self) -> dict:
        return {"mean_dist_ab_mm": self.mean_ab, "mean_dist_ba_mm": self.mean_ba, "chamfer_mm": self.chamfer}


def directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbour distance from every point of ``a`` to the set ``b``."""
    d, _ = cKDTree(b).query(a, k=1)
    return d


def cloud_mean_distance(cloud_a, cloud_b, bins: int = 32) -> CloudDistanceReport:
    a = getattr(cloud_a, "points", cloud_a)
    b = getattr(cloud_b, "points", cloud_b)
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("empty cloud")
    dab = directed_distances(a, b)
    dba = directed_distances(b, a)
    mab, mba = float(dab.mean()), float(dba.mean())
    both = np.concatenate([dab, dba])
    hi = both.max() if both.max() > 0 else 1.0
    hist, edges = np.histogram(both, bins=bins, range=(0.0, hi))
    return CloudDistanceReport(mab, mba, 0.5 * (mab + mba), hist, edges)
