"""Photometric fitting of a RadianceField: loss, Adam, gradient audit and the training loop."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .field import FieldDivergedError, RadianceField, save_checkpoint
from .geometry import RayBundle, camera_rays
from .metrics import psnr, ssim
from .render import RenderConfig, backward_samples, render_image, render_samples, sample_along_rays, stratified_samples

MAX_SKIPS = 10


class DivergedError(FieldDivergedError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_rays: int = 4096
    lr_tables: float = 1e-2
    lr_network: float = 1e-3
    decay: float = 0.33
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    seed: int = 0
    eikonal_weight: float = 0.1
    eikonal_points: int = 256
    val_interval: int = 500
    n_coarse: int = 64
    n_fine: int = 128
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.lr_tables <= 0 or self.lr_network <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam moments")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def render_config(self, background=(1.0, 1.0, 1.0)) -> RenderConfig:
        return RenderConfig(self.n_coarse, self.n_fine, tuple(background))


# loss & optimiser -------------------------------------------------------------


def photometric_loss(rendered, target) -> float:
    """Mean over rays of the per-ray squared colour error summed over channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"batch shape mismatch: {rendered.shape} vs {target.shape}")
    if rendered.shape[0] == 0:
        return 0.0
    return float(np.sum((rendered - target) ** 2) / rendered.shape[0])


def photometric_loss_grad(rendered, target) -> np.ndarray:
    return 2.0 * (np.asarray(rendered) - np.asarray(target)) / len(rendered)


@dataclass
class AdamState:
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)
    step: int = 0
    skipped: int = 0
    consecutive_skips: int = 0


def optimizer_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, lr_scale: float = 1.0,
                   lr: dict | None = None) -> bool:
    """In-place Adam update. Returns False (and counts a skip) when any gradient is non-finite."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        state.consecutive_skips += 1
        if state.consecutive_skips >= MAX_SKIPS:
            raise DivergedError(f"diverged: {state.consecutive_skips} consecutive non-finite gradients")
        return False
    state.consecutive_skips = 0
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr is not None and name in lr:
            rate = lr[name]
        else:
            rate = cfg.lr_tables if name.startswith("encoding") else cfg.lr_network
        p -= (rate * lr_scale) * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return True


def lr_scale_at(iteration: int, total: int, decay: float) -> float:
    milestones = (total // 3, (2 * total) // 3)
    return decay ** sum(iteration >= m for m in milestones if m > 0)


# gradients of the full pipeline ---------------------------------------------------


def loss_and_grads(field: RadianceField, rays: RayBundle, t: np.ndarray, target: np.ndarray, background,
                   total_rays: int | None = None):
    """Photometric loss (sum part for this shard) and its parameter gradients for fixed samples."""
    n = total_rays or len(rays)
    out = render_samples(field, rays, t, background, keep=True)
    diff = out.color - target
    loss = float(np.sum(diff**2)) / n
    grads = backward_samples(field, out.ctx, 2.0 * diff / n, background)
    return loss, grads


def eikonal_loss_and_grads(field: RadianceField, points: np.ndarray, h: float):
    """Mean (|grad f| - 1)^2 with grad f taken by central differences of step h."""
    n = len(points)
    offsets = np.concatenate([np.eye(3), -np.eye(3)]) * h
    pts = (points[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    out = field.forward(pts, None, need_color=False, keep=True)
    f = out.value.reshape(6, n).astype(np.float64)
    g = (f[:3] - f[3:]) / (2 * h)  # (3, n)
    norm = np.sqrt(np.sum(g * g, axis=0))
    loss = float(np.mean((norm - 1.0) ** 2))
    d_g = 2.0 * (norm - 1.0) / np.maximum(norm, 1e-12) * g / n
    d_f = np.concatenate([d_g, -d_g]) / (2 * h)
    grads = field.backward(out.cache, d_f.reshape(-1).astype(field.dtype), None)
    return loss, grads


def _accumulate(total: dict, part: dict, scale: float = 1.0):
    for k, v in part.items():
        if k in total:
            total[k] += scale * v
        else:
            total[k] = scale * v if scale != 1.0 else v.copy()


# gradient audit -----------------------------------------------------------------


@dataclass
class AuditReport:
    max_rel_error: float
    worst_param: str
    per_group: dict  # group -> (max rel error, samples checked)
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _kink_signature(ctx) -> bytes:
    """Packed ReLU masks and clamped-alpha pattern: the linear piece the loss is on."""
    _, trunk_cache, _, color_cache, _ = ctx.field_cache
    parts = [np.packbits(h > 0) for h in trunk_cache[1:]]
    parts += [np.packbits(h > 0) for h in (color_cache or [])[1:]]
    if ctx.ratio is not None:
        parts.append(np.packbits(ctx.ratio < 1.0))
    return b"".join(p.tobytes() for p in parts)


def _fd_derivative(arr, i, loss_fn, sig0, rel_step, shrink=4):
    """Central difference that never straddles a ReLU kink.

    The step shrinks by 10x until neither side changes the activation pattern; if only one
    side stays on the current piece a second-order one-sided stencil is used instead.
    """
    orig = arr[i]
    h = rel_step * max(1.0, abs(orig))

    def at(delta):
        arr[i] = orig + delta
        try:
            return loss_fn()
        finally:
            arr[i] = orig

    l0 = None
    for _ in range(shrink):
        lp, sp = at(h)
        lm, sm = at(-h)
        if sp == sig0 and sm == sig0:
            return (lp - lm) / (2 * h)
        for side, (l1, s1) in ((1.0, (lp, sp)), (-1.0, (lm, sm))):
            if s1 == sig0:
                l2, s2 = at(2 * side * h)
                if s2 == sig0:
                    if l0 is None:
                        l0 = at(0.0)[0]
                    return side * (-3 * l0 + 4 * l1 - l2) / (2 * h)
        h /= 10.0
    return (lp - lm) / (2 * h * 10.0)


def gradient_audit(field: RadianceField, rays: RayBundle, target: np.ndarray, samples_per_ray: int = 16,
                   per_group: int = 200, rel_step: float = 1e-5, floor: float = 1e-6, seed: int = 0,
                   background=(1.0, 1.0, 1.0), grads: dict | None = None) -> AuditReport:
    """Central finite differences vs the analytic gradient on sampled parameters of every group.

    Sample positions along the rays are held fixed so the loss is a smooth function of the
    parameters. ``grads`` may be supplied to audit an externally computed gradient.
    """
    if field.dtype != np.float64:
        raise ValueError("gradient audit needs a float64 field")
    rng = np.random.default_rng(seed)
    t = stratified_samples(rays.near, rays.far, samples_per_ray, rng)

    def loss_fn():
        out = render_samples(field, rays, t, background, keep=True)
        return photometric_loss(out.color, target), _kink_signature(out.ctx)

    if grads is None:
        _, grads = loss_and_grads(field, rays, t, target, background)
    _, sig0 = loss_fn()
    worst, worst_name, checked = 0.0, "", 0
    report = {}
    for group, names in field.param_groups().items():
        sizes = np.array([field.params[n].size for n in names])
        total = int(sizes.sum())
        if total <= per_group:
            picks = [(n, i) for n in names for i in range(field.params[n].size)]
        else:
            # half from parameters the batch touches, the rest uniformly (mostly dead table slots)
            live = [(n, i) for n in names for i in np.flatnonzero(grads[n].reshape(-1))]
            k = min(len(live), per_group // 2)
            picks = [(live[j][0], int(live[j][1])) for j in rng.choice(len(live), size=k, replace=False)] if k else []
            while len(picks) < per_group:
                n = names[rng.choice(len(names), p=sizes / total)]
                picks.append((n, int(rng.integers(field.params[n].size))))
        g_max = 0.0
        for name, i in picks:
            num = _fd_derivative(field.params[name].reshape(-1), i, loss_fn, sig0, rel_step)
            ana = float(grads[name].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            g_max = max(g_max, err)
            if err > worst or not worst_name:
                worst, worst_name = max(err, worst), f"{name}[{i}]"
        report[group] = (g_max, len(picks))
        checked += len(picks)
    return AuditReport(worst, worst_name, report, checked)


# training loop --------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list = dc_field(default_factory=list)  # (iteration, loss, psnr, ssim, seconds, param_norm)
    losses: list = dc_field(default_factory=list)  # every iteration
    skipped: int = 0

    HEADER = ("iteration", "loss", "psnr", "ssim", "seconds", "param_norm")

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for row in self.rows:
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def param_norm(field: RadianceField) -> float:
    return float(np.sqrt(sum(np.sum(np.asarray(p, dtype=np.float64) ** 2) for p in field.params.values())))


def _dataset_rays(dataset, bounds):
    origins, dirs, near, far, colors = [], [], [], [], []
    for cam, img in zip(dataset.cameras, dataset.images):
        r = camera_rays(cam, bounds)
        origins.append(r.origins)
        dirs.append(r.directions)
        near.append(r.near)
        far.append(r.far)
        colors.append(np.asarray(img, dtype=np.float64).reshape(-1, 3) / 255.0)
    rays = RayBundle(np.concatenate(origins), np.concatenate(dirs), np.concatenate(near), np.concatenate(far))
    return rays, np.concatenate(colors)


def validate(field: RadianceField, dataset, rcfg: RenderConfig, views=None):
    """Mean PSNR / SSIM over ``views`` rendered with deterministic midpoint samples."""
    views = range(len(dataset)) if views is None else views
    ps, ss = [], []
    for i in views:
        img, _ = render_image(field, dataset.cameras[i], rcfg, None, field.bounds)
        gt = np.asarray(dataset.images[i], dtype=np.float64) / 255.0
        p = psnr(img, gt, 1.0)
        ps.append(p.value if p.finite else 100.0)
        ss.append(ssim(img, gt, max_val=1.0).score)
    return float(np.mean(ps)), float(np.mean(ss))


def train(field: RadianceField, dataset, cfg: TrainConfig, val_dataset=None, checkpoint_dir=None,
          background=(1.0, 1.0, 1.0), progress=None):
    """Optimise ``field`` in place. Returns (field, TrainLog)."""
    log = TrainLog()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.iterations == 0:
        return field, log
    rcfg = cfg.render_config(background)
    rays, colors = _dataset_rays(dataset, field.bounds)
    hit = np.flatnonzero(rays.hit)
    if len(hit) == 0:
        raise ValueError("no training ray intersects the scene cube")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    val_set = val_dataset if val_dataset is not None else dataset.subset([0])
    eik_h = 1e-3 * 2 * field.bounds.half_extent
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    t0 = time.perf_counter()
    window = []
    try:
        for it in range(1, cfg.iterations + 1):
            idx = hit[rng.integers(len(hit), size=cfg.batch_rays)]
            batch = rays.subset(idx)
            target = colors[idx]
            shards = np.array_split(np.arange(cfg.batch_rays), cfg.workers)
            seeds = np.random.SeedSequence([cfg.seed, it]).spawn(len(shards)) if cfg.workers > 1 else None

            def work(k):
                sub = batch.subset(shards[k])
                r = rng if seeds is None else np.random.default_rng(seeds[k])
                t = sample_along_rays(field, sub, rcfg, r)
                return loss_and_grads(field, sub, t, target[shards[k]], background, cfg.batch_rays)

            parts = list(pool.map(work, range(len(shards)))) if pool else [work(0)]
            loss = 0.0
            grads: dict = {}
            for part_loss, part_grads in parts:  # worker-index order keeps the sum reproducible
                loss += part_loss
                _accumulate(grads, part_grads)
            if field.head == "sdf" and cfg.eikonal_weight > 0:
                lo = field.bounds.lo
                pts = lo + rng.random((cfg.eikonal_points, 3)) * (2 * field.bounds.half_extent)
                _, eg = eikonal_loss_and_grads(field, pts, eik_h)
                _accumulate(grads, eg, cfg.eikonal_weight)
            optimizer_step(field.params, grads, state, cfg, lr_scale_at(it - 1, cfg.iterations, cfg.decay))
            log.losses.append(loss)
            window.append(loss)
            if it % cfg.val_interval == 0 or it == cfg.iterations:
                vp, vs = validate(field, val_set, rcfg)
                log.rows.append((it, float(np.mean(window)), vp, vs, time.perf_counter() - t0, param_norm(field)))
                window = []
                if checkpoint_dir is not None:
                    Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                    save_checkpoint(field, Path(checkpoint_dir) / f"iter_{it:06d}.ckpt")
                if progress:
                    progress(log.rows[-1])
    finally:
        if pool:
            pool.shutdown()
    log.skipped = state.skipped
    return field, log
