"""Frequency and multiresolution hash-grid input encodings."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numba
import numpy as np

PRIMES = (1, 2654435761, 805459861)

# corner offsets in (x, y, z) bit order: corner k has offset ((k>>0)&1, (k>>1)&1, (k>>2)&1)
CORNERS = np.array([[(k >> 0) & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class FrequencyEncodingConfig:
    num_bands: int = 10
    include_input: bool = True

    def __post_init__(self):
        if self.num_bands < 1:
            raise ValueError("num_bands must be >= 1")

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * (2 * self.num_bands + int(self.include_input))


def frequency_encode(p, cfg: FrequencyEncodingConfig) -> np.ndarray:
    """Per component: [sin(2^0 pi p), cos(2^0 pi p), sin(2^1 pi p), ...], raw inputs appended last."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64) if not isinstance(p, np.ndarray) else p)
    freqs = (2.0 ** np.arange(cfg.num_bands)) * np.pi
    arg = p[..., None] * freqs  # (..., d, L)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (..., d, L, 2)
    out = enc.reshape(*p.shape[:-1], -1)
    if cfg.include_input:
        out = np.concatenate([out, p], axis=-1)
    return out


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    table_size: int = 2**19
    features_per_entry: int = 2
    base_resolution: int = 16
    max_resolution: int = 524288

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least two levels")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if not self.base_resolution < self.max_resolution:
            raise ValueError("base_resolution must be below max_resolution")
        if self.features_per_entry < 1:
            raise ValueError("features_per_entry must be >= 1")

    @property
    def growth(self) -> float:
        return float(np.exp((np.log(self.max_resolution) - np.log(self.base_resolution)) / (self.levels - 1)))

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_entry

    def to_dict(self):
        return asdict(self)


def level_resolution(level: int, cfg: HashGridConfig) -> int:
    if not 0 <= level < cfg.levels:
        raise IndexError(f"level {level} outside [0, {cfg.levels})")
    if level == cfg.levels - 1:
        return int(cfg.max_resolution)
    # guard against exp/log round-off landing just below an integer
    return int(np.floor(cfg.base_resolution * cfg.growth**level * (1 + 1e-12)))


def hash_index(vertex, table_size: int) -> np.ndarray:
    """Spatial XOR hash with 32-bit wrap-around products, reduced mod ``table_size``."""
    v = np.asarray(vertex).astype(np.uint32)
    h = v[..., 0] * np.uint32(PRIMES[0])
    h ^= v[..., 1] * np.uint32(PRIMES[1])
    h ^= v[..., 2] * np.uint32(PRIMES[2])
    out = h % np.uint32(table_size)
    return out.astype(np.int64) if out.ndim else int(out)


class HashGrid:
    """Trainable per-level feature tables addressed by the spatial hash."""

    def __init__(self, cfg: HashGridConfig, rng=None, dtype=np.float64, tables=None):
        self.cfg = cfg
        self.resolutions = [level_resolution(level, cfg) for level in range(cfg.levels)]
        if tables is None:
            rng = np.random.default_rng(rng)
            tables = rng.uniform(-1e-4, 1e-4, size=(cfg.levels, cfg.table_size, cfg.features_per_entry))
        self.tables = np.asarray(tables, dtype=dtype)
        self.out_of_bounds = 0

    def lookup(self, p: np.ndarray):
        """Corner table indices (levels, n, 8) and trilinear weights (levels, n, 8)."""
        p = np.asarray(p)
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            outside = np.any((p < 0.0) | (p > 1.0), axis=-1)
            self.out_of_bounds += int(outside.sum())
            p = np.clip(p, 0.0, 1.0)
        n = p.shape[0]
        L = self.cfg.levels
        mask = np.uint32(self.cfg.table_size - 1)
        idx = np.empty((L, n, 8), dtype=np.int64)
        wts = np.empty((L, n, 8), dtype=p.dtype)
        for level, res in enumerate(self.resolutions):
            x = p * res
            cell = np.minimum(np.floor(x), res - 1)
            frac = x - cell
            cell = cell.astype(np.uint32)
            # per-axis hash terms and weights, combined over the 8 corners (bit order x, y, z)
            hx = [cell[:, 0] * np.uint32(PRIMES[0]), (cell[:, 0] + np.uint32(1)) * np.uint32(PRIMES[0])]
            hy = [cell[:, 1] * np.uint32(PRIMES[1]), (cell[:, 1] + np.uint32(1)) * np.uint32(PRIMES[1])]
            hz = [cell[:, 2] * np.uint32(PRIMES[2]), (cell[:, 2] + np.uint32(1)) * np.uint32(PRIMES[2])]
            wx = [1.0 - frac[:, 0], frac[:, 0]]
            wy = [1.0 - frac[:, 1], frac[:, 1]]
            wz = [1.0 - frac[:, 2], frac[:, 2]]
            for oz in (0, 1):
                for oy in (0, 1):
                    hyz = hy[oy] ^ hz[oz]
                    wyz = wy[oy] * wz[oz]
                    for ox in (0, 1):
                        k = ox | (oy << 1) | (oz << 2)
                        idx[level, :, k] = (hx[ox] ^ hyz) & mask
                        wts[level, :, k] = wx[ox] * wyz
        return idx, wts

    def encode(self, p: np.ndarray):
        """Features (n, levels*F) and the (idx, weights) cache used by :meth:`backward`."""
        p = np.ascontiguousarray(p, dtype=self.tables.dtype)
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            self.out_of_bounds += int(np.any((p < 0.0) | (p > 1.0), axis=-1).sum())
            p = np.clip(p, 0.0, 1.0)
        L = self.cfg.levels
        n = p.shape[0]
        idx = np.empty((L, n, 8), dtype=np.int32)
        wts = np.empty((L, n, 8), dtype=p.dtype)
        out = np.empty((n, L, self.cfg.features_per_entry), dtype=self.tables.dtype)
        _encode_kernel(p, self.tables, np.asarray(self.resolutions, dtype=np.int64), idx, wts, out)
        return out.reshape(n, -1), (idx, wts)

    def backward(self, grad_out: np.ndarray, cache) -> np.ndarray:
        """Gradient w.r.t. the tables (dense, same shape as ``tables``)."""
        idx, wts = cache
        L, n, _ = idx.shape
        g = np.ascontiguousarray(grad_out, dtype=self.tables.dtype).reshape(n, L, self.cfg.features_per_entry)
        grad = np.zeros_like(self.tables)
        _scatter_kernel(g, idx, wts, grad)
        return grad


@numba.njit(cache=True, nogil=True)
def _encode_kernel(p, tables, resolutions, idx, wts, out):
    L, T, F = tables.shape
    n = p.shape[0]
    mask = np.uint32(T - 1)
    p0, p1, p2 = np.uint32(PRIMES[0]), np.uint32(PRIMES[1]), np.uint32(PRIMES[2])
    one = p.dtype.type(1.0)
    for lv in range(L):
        res = resolutions[lv]
        for i in range(n):
            x0 = p[i, 0] * res
            x1 = p[i, 1] * res
            x2 = p[i, 2] * res
            c0 = min(np.floor(x0), res - 1)
            c1 = min(np.floor(x1), res - 1)
            c2 = min(np.floor(x2), res - 1)
            f0, f1, f2 = x0 - c0, x1 - c1, x2 - c2
            u0, u1, u2 = np.uint32(c0), np.uint32(c1), np.uint32(c2)
            for f in range(F):
                out[i, lv, f] = 0.0
            for k in range(8):
                ox, oy, oz = k & 1, (k >> 1) & 1, (k >> 2) & 1
                h = ((u0 + np.uint32(ox)) * p0) ^ ((u1 + np.uint32(oy)) * p1) ^ ((u2 + np.uint32(oz)) * p2)
                j = np.int32(h & mask)
                w = (f0 if ox else one - f0) * (f1 if oy else one - f1) * (f2 if oz else one - f2)
                idx[lv, i, k] = j
                wts[lv, i, k] = w
                for f in range(F):
                    out[i, lv, f] += w * tables[lv, j, f]


@numba.njit(cache=True, nogil=True)
def _scatter_kernel(g, idx, wts, grad):
    L, n, _ = idx.shape
    F = grad.shape[2]
    for lv in range(L):
        for i in range(n):
            for k in range(8):
                j = idx[lv, i, k]
                w = wts[lv, i, k]
                for f in range(F):
                    grad[lv, j, f] += w * g[i, lv, f]


def hash_encode(p, grid: HashGrid) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=grid.tables.dtype))
    return grid.encode(p)[0]
