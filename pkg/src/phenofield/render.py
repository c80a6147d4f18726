"""Ray sampling and differentiable emission-absorption compositing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .field import RadianceField, tsdf_truncate, tsdf_truncate_grad
from .geometry import Camera, RayBundle, SceneBounds, camera_rays


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 128
    background: tuple = (1.0, 1.0, 1.0)
    chunk: int = 4096

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValueError("n_coarse must be >= 2")
        if self.n_fine < 0:
            raise ValueError("n_fine must be >= 0")


@dataclass
class RaySamples:
    t: np.ndarray
    deltas: np.ndarray
    values: np.ndarray | None = None
    colors: np.ndarray | None = None
    weights: np.ndarray | None = None


class Composite(NamedTuple):
    color: np.ndarray
    weights: np.ndarray
    depth: np.ndarray
    acc: np.ndarray


# sampling -----------------------------------------------------------------


def stratified_samples(near, far, n: int, rng=None) -> np.ndarray:
    """One draw per equal-width bin of [near, far]; ``rng=None`` takes bin midpoints."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if np.all(far <= near):
        return np.zeros((len(near), 0))
    u = np.full((len(near), n), 0.5) if rng is None else rng.random((len(near), n))
    return near[:, None] + (far - near)[:, None] * (np.arange(n) + u) / n


def sample_edges(t: np.ndarray, near=None, far=None) -> np.ndarray:
    """Bin edges around each sample: midpoints between neighbours, closed by near/far."""
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    lo = t[:, :1] - 0.5 * (t[:, 1:2] - t[:, :1]) if near is None else np.asarray(near, dtype=np.float64).reshape(-1, 1)
    hi = t[:, -1:] + 0.5 * (t[:, -1:] - t[:, -2:-1]) if far is None else np.asarray(far, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([np.broadcast_to(lo, (t.shape[0], 1)), mids, np.broadcast_to(hi, (t.shape[0], 1))], axis=1)


def importance_samples(t_coarse, weights, n_fine: int, rng=None, near=None, far=None):
    """Inverse-CDF draws from the piecewise-constant pdf given by the coarse weights.

    Returns the merged, sorted sample positions and a per-ray flag set where all weights
    were zero and stratified draws were used instead.
    """
    t_coarse = np.atleast_2d(t_coarse)
    weights = np.atleast_2d(weights)
    R = t_coarse.shape[0]
    fallback = np.zeros(R, dtype=bool)
    if n_fine == 0:
        return t_coarse.copy(), fallback
    if np.any(weights < 0):
        raise ContractError("coarse weights must be non-negative")
    edges = sample_edges(t_coarse, near, far)
    total = weights.sum(axis=1, keepdims=True)
    fallback = total[:, 0] <= 0
    pdf = np.where(fallback[:, None], 1.0, weights) / np.where(fallback, weights.shape[1], total[:, 0])[:, None]
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = np.full((R, n_fine), 0.5) if rng is None else rng.random((R, n_fine))
    if fallback.any():
        # stratified in u-space == stratified in t over equal-mass bins
        k = np.arange(n_fine)
        u_strat = (k + (0.5 if rng is None else rng.random((int(fallback.sum()), n_fine)))) / n_fine
        u[fallback] = u_strat
    t_fine = _invert_cdf(cdf, edges, u)
    merged = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
    return merged, fallback


def _invert_cdf(cdf, edges, u):
    R, nb = cdf.shape
    # per-row searchsorted via offsetting rows into disjoint ranges
    offs = np.arange(R)[:, None] * 2.0
    flat_cdf = (cdf + offs).ravel()
    i = np.searchsorted(flat_cdf, (u + offs).ravel(), side="right").reshape(u.shape) - 1
    i = i - np.arange(R)[:, None] * nb
    i = np.clip(i, 0, nb - 2)
    c0 = np.take_along_axis(cdf, i, 1)
    c1 = np.take_along_axis(cdf, i + 1, 1)
    e0 = np.take_along_axis(edges, i, 1)
    e1 = np.take_along_axis(edges, i + 1, 1)
    width = c1 - c0
    frac = np.where(width > 0, (u - c0) / np.where(width > 0, width, 1.0), 0.0)
    return e0 + frac * (e1 - e0)


def sample_deltas(t: np.ndarray) -> np.ndarray:
    """Interval to the next sample; the last interval is the mean of the preceding ones."""
    t = np.atleast_2d(t)
    d = np.diff(t, axis=1)
    last = d.mean(axis=1, keepdims=True) if d.shape[1] else np.ones((t.shape[0], 1))
    return np.concatenate([d, last], axis=1)


# compositing --------------------------------------------------------------


def transmittance(sigma, deltas) -> np.ndarray:
    """T_i = exp(-sum_{j<i} sigma_j delta_j)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigma.shape != deltas.shape:
        raise ContractError("sigma and deltas must have equal lengths")
    if np.any(sigma < 0):
        raise ContractError("negative density")
    tau = sigma * deltas
    excl = np.cumsum(tau, axis=-1) - tau
    return np.exp(-excl)


def _finish(weights, colors, t, bg):
    acc = weights.sum(axis=-1)
    color = np.einsum("...s,...sc->...c", weights, colors) + (1.0 - acc)[..., None] * bg
    depth = (weights * t).sum(axis=-1) / np.maximum(acc, 1e-10)
    return Composite(color, weights, depth, acc)


def density_alpha(sigma, deltas):
    return -np.expm1(-sigma * deltas)


def composite_density(t, deltas, sigma, colors, background=(1.0, 1.0, 1.0)) -> Composite:
    T = transmittance(sigma, deltas)
    weights = T * density_alpha(sigma, deltas)
    return _finish(weights, colors, t, np.asarray(background, dtype=np.float64))


def sdf_alpha(f, s):
    """alpha_i = max(1 - Phi_s(f_{i+1}) / Phi_s(f_i), 0) via log-sigmoids; the last sample gets 0."""
    x = s * np.asarray(f, dtype=np.float64)
    ls = -np.logaddexp(0.0, -x)
    with np.errstate(over="ignore"):  # inf ratio -> alpha 0
        ratio = np.exp(ls[..., 1:] - ls[..., :-1])
    alpha = np.maximum(1.0 - ratio, 0.0)
    return np.concatenate([alpha, np.zeros_like(alpha[..., :1])], axis=-1), ratio


def composite_sdf(t, f, colors, s, background=(1.0, 1.0, 1.0)) -> Composite:
    if not s > 0:
        raise ContractError("sharpness s must be positive")
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] < 2:
        raise ContractError("SDF compositing needs at least two samples")
    alpha, _ = sdf_alpha(f, s)
    T = np.cumprod(1.0 - alpha, axis=-1)
    T = np.concatenate([np.ones_like(T[..., :1]), T[..., :-1]], axis=-1)
    return _finish(T * alpha, colors, t, np.asarray(background, dtype=np.float64))


def render_ray_density(samples: RaySamples, background=(1.0, 1.0, 1.0)) -> Composite:
    out = composite_density(samples.t, samples.deltas, samples.values, samples.colors, background)
    samples.weights = out.weights
    return out


def render_ray_sdf(samples: RaySamples, s: float, background=(1.0, 1.0, 1.0)) -> Composite:
    out = composite_sdf(samples.t, samples.values, samples.colors, s, background)
    samples.weights = out.weights
    return out


def alpha_backward(alpha, T, colors, bg, grad_color):
    """dL/dalpha and dL/dcolors for color = bg + sum_i T_i alpha_i (c_i - bg)."""
    R, S = alpha.shape
    diff = colors - bg
    gc = np.einsum("rsc,rc->rs", diff, grad_color)  # g . (c_k - bg)
    # A_k: colour (minus bg) contributed from sample k onward given arrival at k
    tail = np.zeros(R)
    g_alpha = np.empty((R, S))
    for k in range(S - 1, -1, -1):
        g_alpha[:, k] = T[:, k] * (gc[:, k] - tail)
        tail = alpha[:, k] * gc[:, k] + (1.0 - alpha[:, k]) * tail
    g_colors = (T * alpha)[:, :, None] * grad_color[:, None, :]
    return g_alpha, g_colors


# batched field rendering ----------------------------------------------------


class RenderContext(NamedTuple):
    field_cache: tuple
    t: np.ndarray
    deltas: np.ndarray
    raw_value: np.ndarray
    colors: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    ratio: np.ndarray | None
    shape: tuple


class RenderOutput(NamedTuple):
    color: np.ndarray
    depth: np.ndarray
    acc: np.ndarray
    weights: np.ndarray
    ctx: RenderContext | None


def _points(rays: RayBundle, t):
    return rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]


def _weights_from_values(field: RadianceField, values, t, deltas):
    if field.head == "density":
        alpha = density_alpha(values, deltas)
        T = np.exp(-(np.cumsum(values * deltas, axis=1) - values * deltas))
        return T * alpha
    ft = tsdf_truncate(values, field.cfg.tsdf_slope)
    alpha, _ = sdf_alpha(ft, field.sharpness)
    T = np.cumprod(1.0 - alpha, axis=1)
    T = np.concatenate([np.ones_like(T[:, :1]), T[:, :-1]], axis=1)
    return T * alpha


def sample_along_rays(field: RadianceField, rays: RayBundle, cfg: RenderConfig, rng=None) -> np.ndarray:
    """Coarse stratified samples refined by importance sampling on the coarse weights."""
    t_c = stratified_samples(rays.near, rays.far, cfg.n_coarse, rng)
    if cfg.n_fine == 0:
        return t_c
    R = len(rays)
    pts = _points(rays, t_c).reshape(-1, 3)
    values = field.forward(pts, None, need_color=False).value.reshape(R, -1).astype(np.float64)
    w = _weights_from_values(field, values, t_c, sample_deltas(t_c))
    t, _ = importance_samples(t_c, w, cfg.n_fine, rng, rays.near, rays.far)
    return t


def render_samples(field: RadianceField, rays: RayBundle, t: np.ndarray, background=(1.0, 1.0, 1.0),
                   keep: bool = False) -> RenderOutput:
    R, S = t.shape
    bg = np.asarray(background, dtype=np.float64)
    deltas = sample_deltas(t)
    pts = _points(rays, t).reshape(-1, 3)
    out = field.forward(pts, rays.directions, need_color=True, keep=keep)
    values = out.value.reshape(R, S).astype(np.float64)
    colors = out.color.reshape(R, S, 3).astype(np.float64)
    ratio = None
    if field.head == "density":
        alpha = density_alpha(values, deltas)
        tau = values * deltas
        T = np.exp(-(np.cumsum(tau, axis=1) - tau))
    else:
        ft = tsdf_truncate(values, field.cfg.tsdf_slope)
        alpha, ratio = sdf_alpha(ft, field.sharpness)
        T = np.cumprod(1.0 - alpha, axis=1)
        T = np.concatenate([np.ones((R, 1)), T[:, :-1]], axis=1)
    comp = _finish(T * alpha, colors, t, bg)
    ctx = RenderContext(out.cache, t, deltas, values, colors, alpha, T, ratio, (R, S)) if keep else None
    return RenderOutput(comp.color, comp.depth, comp.acc, comp.weights, ctx)


def backward_samples(field: RadianceField, ctx: RenderContext, grad_color: np.ndarray, background=(1.0, 1.0, 1.0)) -> dict:
    """Parameter gradients given dL/d(rendered colour) per ray."""
    R, S = ctx.shape
    bg = np.asarray(background, dtype=np.float64)
    g_alpha, g_colors = alpha_backward(ctx.alpha, ctx.T, ctx.colors, bg, grad_color)
    g_log_s = None
    if field.head == "density":
        g_value = g_alpha * ctx.deltas * (1.0 - ctx.alpha)
    else:
        s = field.sharpness
        b = field.cfg.tsdf_slope
        ft = tsdf_truncate(ctx.raw_value, b)
        x = s * ft
        one_minus_sig = expit(-x)
        active = ctx.ratio < 1.0
        ga = np.where(active, g_alpha[:, :-1] * ctx.ratio, 0.0)  # dL/dalpha_k * r_k
        g_x = np.zeros((R, S))
        g_x[:, :-1] += ga * one_minus_sig[:, :-1]
        g_x[:, 1:] -= ga * one_minus_sig[:, 1:]
        g_value = g_x * s * tsdf_truncate_grad(ctx.raw_value, b)
        g_log_s = np.sum(g_x * ft) * s
    dt = field.dtype
    grads = field.backward(ctx.field_cache, g_value.reshape(-1).astype(dt), g_colors.reshape(-1, 3).astype(dt))
    if g_log_s is not None:
        grads["sdf.log_s"] = np.array([g_log_s], dtype=dt)
    return grads


def render_rays(field: RadianceField, rays: RayBundle, cfg: RenderConfig, rng=None):
    """Colour, depth and accumulated opacity for every ray, chunked; misses get the background."""
    n = len(rays)
    bg = np.asarray(cfg.background, dtype=np.float64)
    color = np.broadcast_to(bg, (n, 3)).copy()
    depth = np.zeros(n)
    acc = np.zeros(n)
    hit = np.flatnonzero(rays.hit)
    for start in range(0, len(hit), cfg.chunk):
        idx = hit[start : start + cfg.chunk]
        sub = rays.subset(idx)
        t = sample_along_rays(field, sub, cfg, rng)
        out = render_samples(field, sub, t, cfg.background)
        color[idx], depth[idx], acc[idx] = out.color, out.depth, out.acc
    return color, depth, acc


def render_image(field: RadianceField, camera: Camera, cfg: RenderConfig, rng=None, bounds: SceneBounds | None = None):
    """Image (H, W, 3) in [0, 1] and expected-depth map (H, W)."""
    bounds = bounds or field.bounds
    rays = camera_rays(camera, bounds)
    color, depth, _ = render_rays(field, rays, cfg, rng)
    return color.reshape(camera.height, camera.width, 3), depth.reshape(camera.height, camera.width)
