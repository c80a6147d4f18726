"""Radiance field: encoded MLP with a density head or a signed-distance head."""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .encoding import FrequencyEncodingConfig, HashGrid, HashGridConfig, frequency_encode
from .geometry import PointCloud, SceneBounds
from .mlp import init_mlp, mlp_backward, mlp_forward

HEADS = ("density", "sdf")
PRESETS = ("classic", "hash")

CHECKPOINT_MAGIC = b"PHFIELD\x00"
CHECKPOINT_VERSION = 1


class FieldDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def logistic_density(x, s):
    """phi_s(x) = s e^{-sx} / (1 + e^{-sx})^2, evaluated as s * sig(sx) * (1 - sig(sx))."""
    if np.any(np.asarray(s) <= 0):
        raise ValueError("sharpness s must be positive")
    sig = expit(np.multiply(s, x))
    # 1 - sig(sx) == sig(-sx) keeps precision in the upper tail
    return s * sig * expit(-np.multiply(s, x))


def logistic_cdf(x, s):
    return expit(np.multiply(s, x))


def tsdf_truncate(f, b):
    """(1 - e^{-bf}) / (1 + e^{-bf}), i.e. tanh(bf/2)."""
    if np.any(np.asarray(b) <= 0):
        raise ValueError("truncation slope b must be positive")
    return np.tanh(0.5 * np.multiply(b, f))


def tsdf_truncate_grad(f, b):
    t = np.tanh(0.5 * np.multiply(b, f))
    return 0.5 * b * (1.0 - t * t)


@dataclass(frozen=True)
class FieldConfig:
    preset: str = "hash"
    head: str = "density"
    center: tuple = (0.0, 0.0, 0.0)
    half_extent: float = 1.0
    hash: HashGridConfig = field(default_factory=HashGridConfig)
    position_encoding: FrequencyEncodingConfig = field(default_factory=lambda: FrequencyEncodingConfig(10, True))
    direction_encoding: FrequencyEncodingConfig = field(default_factory=lambda: FrequencyEncodingConfig(4, True))
    trunk_widths: tuple = (64, 64)
    color_widths: tuple = (64,)
    geo_features: int = 15
    init_sharpness: float = 20.0
    tsdf_slope: float = 2.0
    sphere_init_radius: float = 0.5
    density_scale: float = 1.0  # sigma = density_scale * softplus(raw)
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.trunk_widths) < 1 or min(self.trunk_widths) <= 0:
            raise ValueError("trunk needs at least one hidden layer of positive width")
        if min(self.color_widths, default=1) <= 0:
            raise ValueError("color widths must be positive")
        if self.tsdf_slope <= 0 or self.init_sharpness <= 0:
            raise ValueError("sharpness and truncation slope must be positive")
        if not self.density_scale > 0:
            raise ValueError("density scale must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        object.__setattr__(self, "color_widths", tuple(int(w) for w in self.color_widths))

    @classmethod
    def from_preset(cls, name: str, head: str = "density", bounds: SceneBounds | None = None, **overrides):
        """``classic``: frequency encoding, 9x256 trunk and a 128-wide colour layer.
        ``hash``: hash-grid encoding, 2x64 trunk."""
        if name == "classic":
            base = dict(preset="classic", trunk_widths=(256,) * 9, color_widths=(128,))
        elif name == "hash":
            base = dict(preset="hash", trunk_widths=(64, 64), color_widths=(64,))
        else:
            raise ValueError(f"unknown preset {name!r}")
        base["head"] = head
        if bounds is not None:
            base["center"] = tuple(bounds.center)
            base["half_extent"] = bounds.half_extent
        base.update(overrides)
        return cls(**base)

    @property
    def bounds(self) -> SceneBounds:
        return SceneBounds(np.array(self.center), self.half_extent)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        if "hash" in d and isinstance(d["hash"], dict):
            d["hash"] = HashGridConfig(**d["hash"])
        for key in ("position_encoding", "direction_encoding"):
            if key in d and isinstance(d[key], dict):
                d[key] = FrequencyEncodingConfig(**d[key])
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


class FieldOutput(NamedTuple):
    value: np.ndarray  # density sigma (>= 0) or raw signed distance f
    color: np.ndarray | None
    cache: tuple | None


class RadianceField:
    """Continuous field over the scene cube; parameters live in ``self.params``."""

    def __init__(self, cfg: FieldConfig, params: dict | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.head = cfg.head
        self.bounds = cfg.bounds
        rng = np.random.default_rng(cfg.seed)
        if cfg.preset == "hash":
            self.grid = HashGrid(cfg.hash, rng=rng, dtype=self.dtype)
            enc_dim = cfg.hash.output_dim
        else:
            self.grid = None
            enc_dim = cfg.position_encoding.output_dim(3)
        dir_dim = cfg.direction_encoding.output_dim(3)
        # classic inputs are O(1); shrink the head so the sphere prior dominates at init
        head_scale = 0.1 if (cfg.head == "sdf" and cfg.preset == "classic") else 1.0
        trunk = init_mlp([enc_dim, *cfg.trunk_widths, 1 + cfg.geo_features], rng, self.dtype, head_scale)
        color = init_mlp([cfg.geo_features + dir_dim, *cfg.color_widths, 3], rng, self.dtype)
        p = {}
        if self.grid is not None:
            p["encoding.tables"] = self.grid.tables
        for i, (W, b) in enumerate(trunk):
            p[f"trunk.{i}.W"], p[f"trunk.{i}.b"] = W, b
        for i, (W, b) in enumerate(color):
            p[f"color.{i}.W"], p[f"color.{i}.b"] = W, b
        if cfg.head == "sdf":
            p["sdf.log_s"] = np.array([np.log(cfg.init_sharpness)], dtype=self.dtype)
        self.n_trunk = len(trunk)
        self.n_color = len(color)
        self.params = p
        if params is not None:
            self.load_params(params)

    # parameter plumbing -------------------------------------------------

    def load_params(self, params: dict):
        for name, arr in params.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name}")
            if self.params[name].shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}")
            self.params[name][...] = arr

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    @staticmethod
    def group_of(name: str, n_trunk: int) -> str:
        if name.startswith("encoding"):
            return "encoding"
        if name.startswith("trunk"):
            return "head" if int(name.split(".")[1]) == n_trunk - 1 else "trunk"
        if name.startswith("color"):
            return "color"
        return "sharpness"

    def param_groups(self) -> dict:
        groups: dict = {}
        for name in self.params:
            groups.setdefault(self.group_of(name, self.n_trunk), []).append(name)
        return groups

    def _layers(self, prefix, n):
        return [(self.params[f"{prefix}.{i}.W"], self.params[f"{prefix}.{i}.b"]) for i in range(n)]

    @property
    def sharpness(self) -> float:
        return float(np.exp(self.params["sdf.log_s"][0])) if self.head == "sdf" else 0.0

    def check_finite(self):
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise FieldDivergedError(f"diverged field: non-finite values in {name}")

    # forward / backward -------------------------------------------------

    def forward(self, points, dirs=None, need_color: bool = True, keep: bool = False) -> FieldOutput:
        points = np.asarray(points, dtype=self.dtype).reshape(-1, 3)
        x = (points - np.asarray(self.cfg.center, dtype=self.dtype)) / self.dtype.type(self.cfg.half_extent)
        if self.grid is not None:
            enc, enc_cache = self.grid.encode((x + 1.0) * 0.5)
        else:
            enc, enc_cache = frequency_encode(x, self.cfg.position_encoding).astype(self.dtype, copy=False), None
        trunk = self._layers("trunk", self.n_trunk)
        out, trunk_cache = mlp_forward(trunk, enc, keep)
        raw = out[:, 0]
        if self.head == "density":
            value = softplus(raw)
            if self.cfg.density_scale != 1.0:
                value = value * self.dtype.type(self.cfg.density_scale)
        else:
            value = raw + (np.linalg.norm(x, axis=1) - self.cfg.sphere_init_radius) * self.cfg.half_extent
        color = color_cache = None
        if need_color:
            dirs = np.asarray(dirs, dtype=self.dtype).reshape(-1, 3)
            dir_enc = frequency_encode(dirs, self.cfg.direction_encoding).astype(self.dtype, copy=False)
            if len(dirs) != len(points):
                # one direction per ray, shared by its consecutive samples
                if len(dirs) == 0 or len(points) % len(dirs):
                    raise ValueError(f"{len(dirs)} directions for {len(points)} points")
                dir_enc = np.repeat(dir_enc, len(points) // len(dirs), axis=0)
            color_in = np.concatenate([out[:, 1:], dir_enc], axis=1)
            logits, color_cache = mlp_forward(self._layers("color", self.n_color), color_in, keep)
            color = expit(logits)
        if not (np.all(np.isfinite(value)) and (color is None or np.all(np.isfinite(color)))):
            self.check_finite()
            raise FieldDivergedError("diverged field: non-finite output")
        cache = (enc_cache, trunk_cache, raw, color_cache, color) if keep else None
        return FieldOutput(value, color, cache)

    def backward(self, cache, d_value, d_color=None) -> dict:
        """Gradients of a scalar loss w.r.t. every parameter, given dL/dvalue and dL/dcolor."""
        enc_cache, trunk_cache, raw, color_cache, color = cache
        n = raw.shape[0]
        grads = {}
        d_out = np.zeros((n, 1 + self.cfg.geo_features), dtype=self.dtype)
        if self.head == "density":
            d_out[:, 0] = d_value * expit(raw) * self.dtype.type(self.cfg.density_scale)
        else:
            d_out[:, 0] = d_value
        if d_color is not None and color_cache is not None:
            d_logits = d_color * color * (1.0 - color)
            cgrads, d_cin = mlp_backward(self._layers("color", self.n_color), color_cache, d_logits, True)
            for i, (dW, db) in enumerate(cgrads):
                grads[f"color.{i}.W"], grads[f"color.{i}.b"] = dW, db
            d_out[:, 1:] = d_cin[:, : self.cfg.geo_features]
        else:
            for i in range(self.n_color):
                grads[f"color.{i}.W"] = np.zeros_like(self.params[f"color.{i}.W"])
                grads[f"color.{i}.b"] = np.zeros_like(self.params[f"color.{i}.b"])
        need_enc = self.grid is not None
        tgrads, d_enc = mlp_backward(self._layers("trunk", self.n_trunk), trunk_cache, d_out, need_enc)
        for i, (dW, db) in enumerate(tgrads):
            grads[f"trunk.{i}.W"], grads[f"trunk.{i}.b"] = dW, db
        if need_enc:
            grads["encoding.tables"] = self.grid.backward(d_enc, enc_cache)
        if self.head == "sdf":
            grads["sdf.log_s"] = np.zeros(1, dtype=self.dtype)
        return grads

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # convenience ----------------------------------------------------------

    def evaluate(self, points, dirs=None, need_color=True):
        out = self.forward(points, dirs, need_color=need_color)
        return out.value, out.color

    def copy(self) -> "RadianceField":
        return RadianceField(self.cfg, {k: v.copy() for k, v in self.params.items()})


def field_eval(field: RadianceField, p, d):
    """(sigma or f, rgb) at positions ``p`` viewed along unit directions ``d``."""
    value, color = field.evaluate(np.atleast_2d(p), np.atleast_2d(d))
    return value, color


# checkpoints ---------------------------------------------------------------


def save_checkpoint(field: RadianceField, path):
    cfg_json = json.dumps(field.cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    flat = np.concatenate([field.params[k].ravel() for k in field.params]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(field.cfg.digest())
        fh.write(struct.pack("<Q", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_checkpoint(path, expected: FieldConfig | None = None) -> RadianceField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a field checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = data[12:44]
    (n_json,) = struct.unpack_from("<Q", data, 44)
    cfg_json = data[52 : 52 + n_json]
    cfg = FieldConfig.from_dict(json.loads(cfg_json))
    if cfg.digest() != digest:
        raise CheckpointError("config digest mismatch (corrupt header)")
    if expected is not None and expected.digest() != digest:
        raise CheckpointError("config digest mismatch: checkpoint was written for a different field config")
    off = 52 + n_json
    (count,) = struct.unpack_from("<Q", data, off)
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=off + 8)
    field = RadianceField(replace(cfg))
    if count != field.num_params:
        raise CheckpointError(f"parameter count {count} does not match config ({field.num_params})")
    pos = 0
    for name, arr in field.params.items():
        arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return field


# surface extraction --------------------------------------------------------


def _grid_points(bounds: SceneBounds, resolution: int, cell_centers: bool):
    h = 2.0 * bounds.half_extent / resolution
    if cell_centers:
        axis = bounds.lo[None, :] + (np.arange(resolution)[:, None] + 0.5) * h
    else:
        h = 2.0 * bounds.half_extent / (resolution - 1)
        axis = bounds.lo[None, :] + np.arange(resolution)[:, None] * h
    return axis, h


def _evaluate_lattice(field, axis, chunk=1 << 16):
    res = axis.shape[0]
    values = np.empty(res**3, dtype=np.float64)
    ii = np.arange(res)
    # x varies slowest so that values.reshape(res, res, res)[i, j, k] is (x_i, y_j, z_k)
    for start in range(0, res**3, chunk):
        flat = np.arange(start, min(start + chunk, res**3))
        i, j, k = flat // (res * res), (flat // res) % res, flat % res
        pts = np.stack([axis[ii[i], 0], axis[ii[j], 1], axis[ii[k], 2]], axis=1)
        values[start : start + len(flat)] = field.evaluate(pts, None, need_color=False)[0]
    return values.reshape(res, res, res)


def _fd_gradient(field, points, h):
    g = np.zeros_like(points)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fp = field.evaluate(points + e, None, need_color=False)[0]
        fm = field.evaluate(points - e, None, need_color=False)[0]
        g[:, a] = (fp - fm) / (2 * h)
    return g


def _exterior(free: np.ndarray) -> np.ndarray:
    """Free lattice nodes connected (6-neighbourhood) to the lattice border."""
    labels, _ = ndimage.label(free)
    border = np.unique(np.concatenate([np.moveaxis(labels, a, 0)[[0, -1]].ravel() for a in range(3)]))
    return np.isin(labels, border[border > 0])


def _edge_crossings(f, axis, h, keep=None):
    """Linearly interpolated sign changes of ``f`` along the lattice edges.

    With a boolean lattice ``keep``, only edges with at least one kept endpoint count.
    """
    pts = []
    for a in range(3):
        f0 = np.moveaxis(f, a, 0)[:-1]
        f1 = np.moveaxis(f, a, 0)[1:]
        # an exact zero on a vertex is claimed by the edge leaving it only
        cross = ((f0 < 0) & (f1 >= 0)) | ((f0 >= 0) & (f1 < 0))
        if keep is not None:
            k = np.moveaxis(keep, a, 0)
            cross &= k[:-1] | k[1:]
        idx = np.argwhere(cross)
        if len(idx) == 0:
            continue
        a0 = f0[cross]
        a1 = f1[cross]
        frac = a0 / (a0 - a1)
        coords = [None, None, None]
        order = [a] + [b for b in range(3) if b != a]
        for col, b in enumerate(order):
            coords[b] = axis[idx[:, col], b]
        p = np.stack(coords, axis=1)
        p[:, a] += frac * h
        pts.append(p)
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def extract_surface_cloud(field, bounds: SceneBounds, resolution: int = 128, threshold: float = 10.0, iso: float = 0.0,
                          with_colors: bool = True, mode: str = "cells", exterior_only: bool = False) -> PointCloud:
    """Surface samples of a field on a regular lattice over ``bounds``.

    SDF heads yield linearly interpolated zero crossings along lattice edges. Density heads
    yield centres of occupied cells (sigma >= threshold) with at least one empty face neighbour;
    cells outside the lattice count as empty. ``mode="crossings"`` instead places density
    samples where sigma crosses the threshold along lattice edges, like the SDF path.

    ``exterior_only`` drops surfaces that face enclosed cavities: the empty side of every
    emitted sample must connect to the border of the lattice (cells outside count as empty).
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8 per axis")
    if mode not in ("cells", "crossings"):
        raise ValueError(f"unknown extraction mode {mode!r}")
    if field.head == "sdf":
        axis, h = _grid_points(bounds, resolution, cell_centers=False)
        g = _evaluate_lattice(field, axis) - iso
        points = _edge_crossings(g, axis, h, _exterior(g >= 0) if exterior_only else None)
    elif mode == "crossings":
        axis, h = _grid_points(bounds, resolution, cell_centers=False)
        g = threshold - _evaluate_lattice(field, axis)
        points = _edge_crossings(g, axis, h, _exterior(g >= 0) if exterior_only else None)
    else:
        axis, h = _grid_points(bounds, resolution, cell_centers=True)
        occ = _evaluate_lattice(field, axis) >= threshold
        padded = np.pad(occ, 1, constant_values=False)
        if exterior_only:
            padded = ~_exterior(~padded)
        empty_neighbor = np.zeros_like(occ)
        for a in range(3):
            for shift in (-1, 1):
                empty_neighbor |= ~np.roll(padded, shift, axis=a)[1:-1, 1:-1, 1:-1]
        boundary = occ & empty_neighbor
        idx = np.argwhere(boundary)
        points = np.stack([axis[idx[:, 0], 0], axis[idx[:, 1], 1], axis[idx[:, 2], 2]], axis=1) if len(idx) else np.zeros((0, 3))
    normal_step = 0.5 * h
    if len(points) == 0:
        warnings.warn("no surface found: extracted cloud is empty", RuntimeWarning, stacklevel=2)
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)) if with_colors else None)
    colors = None
    if with_colors:
        grad = _fd_gradient(field, points, normal_step)
        outward = grad if field.head == "sdf" else -grad
        norm = np.linalg.norm(outward, axis=1, keepdims=True)
        outward = np.where(norm > 0, outward / np.maximum(norm, 1e-300), np.array([0.0, 0.0, 1.0]))
        # view along -normal, as a camera outside the surface would
        colors = field.evaluate(points, -outward)[1].astype(np.float64)
    return PointCloud(points, colors)
