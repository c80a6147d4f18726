"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line to the terminal.

Run ``pytest tests/test_acceptance.py -v`` to see the lines; the slow criteria (toy training
and the end-to-end phenotyping chain) take several minutes on one CPU core.
"""

import csv
import hashlib
import json
import time

import numpy as np
import pytest
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from conftest import FieldAdapter
from phenofield.cli import run
from phenofield.encoding import HashGridConfig
from phenofield.field import FieldConfig, RadianceField, extract_surface_cloud, load_checkpoint
from phenofield.geometry import Camera, SceneBounds, camera_rays, look_at
from phenofield.metrics import cloud_mean_distance, psnr, ssim, to_luma
from phenofield.phenotype import (
    MeasureConfig,
    SegmentConfig,
    apply_scale,
    detect_plate,
    measure_clusters,
    plate_scale,
    segment_clusters,
)
from phenofield.registration import IcpConfig, RigidTransform, cloud_extent, icp
from phenofield.render import (
    RenderConfig,
    composite_density,
    composite_sdf,
    render_image,
    render_rays,
    sample_deltas,
    stratified_samples,
    transmittance,
)
from phenofield.synthetic import AnalyticField, OrbitSpec, Primitive, SceneSpec, generate_synthetic_scene
from phenofield.train import TrainConfig, gradient_audit, train, validate


@pytest.fixture
def emit(capsys):
    def _emit(n, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:>2}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok

    return _emit


# 1 ---------------------------------------------------------------------------------


def test_c01_gradient_audit(emit):
    box = SceneBounds(np.zeros(3), 1.0)
    cam = Camera.from_fov(32, 32, np.deg2rad(40), look_at([0, -3, 1], [0, 0, 0]))
    rng = np.random.default_rng(0)
    rays = camera_rays(cam, box, rng.uniform(10, 22, (16, 2)))
    target = rng.random((16, 3))
    t0 = time.perf_counter()
    worst, lines = 0.0, []
    for preset in ("classic", "hash"):
        for head in ("density", "sdf"):
            field = RadianceField(FieldConfig.from_preset(preset, head, box, dtype="float64"))
            rep = gradient_audit(field, rays, target, per_group=200)
            worst = max(worst, rep.max_rel_error)
            small = [g for g, (_, n) in rep.per_group.items() if n < 200 and g != "sharpness"]
            assert not small, f"{preset}/{head}: groups with < 200 samples: {small}"
            lines.append(f"{preset}/{head}={rep.max_rel_error:.1e}")
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 60
    emit(1, "gradient audit", ok, f"max rel err {worst:.2e} (< 1e-4), {secs:.1f} s (< 60); " + " ".join(lines))
    assert ok


# 2 ---------------------------------------------------------------------------------


def test_c02_quadrature_convergence(emit):
    t0 = time.perf_counter()
    box = SceneBounds(np.zeros(3), 1.0)
    rng = np.random.default_rng(2)
    eyes = rng.normal(size=(100, 3))
    eyes *= 3.0 / np.linalg.norm(eyes, axis=1, keepdims=True)
    aims = rng.uniform(-0.4, 0.4, (100, 3))
    from phenofield.geometry import RayBundle, intersect_cube

    d = aims - eyes
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far = intersect_cube(eyes, d, box)
    rays = RayBundle(eyes, d, near, far)
    assert rays.hit.all()
    scenes = {
        "constant": [Primitive("box", (0, 0, 0), (2.0, 2.0, 2.0), (0.3, 0.6, 0.9), density=1.5)],
        "sphere": [Primitive("sphere", (0.1, 0, 0), (0.5,), (0.9, 0.2, 0.1), density=5.0)],
    }
    errors = {}
    for name, prims in scenes.items():
        analytic = AnalyticField(prims)
        oracle, _ = analytic.render_rays(rays, steps=1024)
        adapter = FieldAdapter(analytic, box)
        errs = []
        for n in (64, 128, 256):
            color, _, _ = render_rays(adapter, rays, RenderConfig(n_coarse=n, n_fine=0))
            errs.append(float(np.abs(color - oracle).max(axis=1).mean()))
        errors[name] = errs
    secs = time.perf_counter() - t0
    floor = 1e-12  # both sides already at round-off; no further decrease is possible
    mono = all(e[i + 1] <= max(e[i], floor) for e in errors.values() for i in range(2))
    final = max(e[-1] for e in errors.values())
    ok = mono and final < 1e-3 and secs < 30
    detail = "; ".join(f"{k}: " + " > ".join(f"{x:.2e}" for x in v) for k, v in errors.items())
    emit(2, "quadrature convergence", ok, f"{detail}; at 256 {final:.2e} (< 1e-3); {secs:.1f} s")
    assert ok


# 3 ---------------------------------------------------------------------------------


def test_c03_weight_invariants(emit):
    rng = np.random.default_rng(3)
    n, s = 100_000, 32
    ok_range = ok_sum = True
    worst_gap = 0.0
    for start in range(0, n, 10_000):
        t = np.sort(rng.uniform(0.0, 4.0, (10_000, s)), axis=1)
        deltas = sample_deltas(t)
        sigma = rng.exponential(3.0, (10_000, s)) * (rng.random((10_000, s)) < 0.6)
        col = rng.random((10_000, s, 3))
        out = composite_density(t, deltas, sigma, col)
        T_end = transmittance(sigma, deltas)[:, -1] * np.exp(-sigma[:, -1] * deltas[:, -1])
        ok_range &= bool(np.all((out.weights >= 0) & (out.weights <= 1)))
        ok_sum &= bool(np.all(out.weights.sum(axis=1) <= 1 + 1e-6))
        worst_gap = max(worst_gap, float(np.abs(out.weights.sum(axis=1) - (1 - T_end)).max()))
        f = rng.normal(scale=0.5, size=(10_000, s)).cumsum(axis=1) * 0.2
        sd = composite_sdf(t, f, col, float(rng.choice([8.0, 64.0, 512.0])))
        ok_range &= bool(np.all((sd.weights >= 0) & (sd.weights <= 1)))
        ok_sum &= bool(np.all(sd.weights.sum(axis=1) <= 1 + 1e-6))
    ok = ok_range and ok_sum and worst_gap <= 1e-9
    emit(3, "weight invariants", ok,
         f"1e5 density + 1e5 sdf rays; w in [0,1]: {ok_range}; sum w <= 1+1e-6: {ok_sum}; "
         f"|sum w - (1 - T_end)| max {worst_gap:.1e} (<= 1e-9)")
    assert ok


# 4 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_c04_toy_training(emit, tmp_path):
    prim = [Primitive("sphere", (0, 0, 0), (0.5,), (0.9, 0.15, 0.1))]
    sc = generate_synthetic_scene(SceneSpec(prim, OrbitSpec(count=20, radius=4, elevation=(30, -15, 10),
                                                              resolution=(64, 64))))
    held = generate_synthetic_scene(SceneSpec(prim, OrbitSpec(count=3, radius=4, elevation=(20,), resolution=(64, 64),
                                                                azimuth_offset=9.0))).dataset
    hc = HashGridConfig(levels=8, table_size=2**15, features_per_entry=2, base_resolution=16, max_resolution=512)
    field = RadianceField(FieldConfig.from_preset("hash", "density", sc.dataset.bounds(), hash=hc, dtype="float32"))
    cfg = TrainConfig(iterations=3000, batch_rays=128, n_coarse=32, n_fine=32, val_interval=250)
    t0 = time.perf_counter()
    field, _ = train(field, sc.dataset, cfg, val_dataset=held.subset([0]), checkpoint_dir=tmp_path)
    secs = time.perf_counter() - t0
    p, s = validate(field, held, cfg.render_config())

    # full training-set photometric loss at every saved checkpoint
    its, losses = [], []
    for ck in sorted(tmp_path.glob("iter_*.ckpt")):
        f = load_checkpoint(ck)
        err = [np.mean((render_image(f, cam, cfg.render_config(), None, f.bounds)[0] - np.asarray(img) / 255.0) ** 2)
               for cam, img in zip(sc.dataset.cameras, sc.dataset.images)]
        its.append(int(ck.stem.split("_")[1]))
        losses.append(float(np.mean(err)))
    at = dict(zip(its, losses))
    rises = [i for i in its if i >= 500 and i + 500 in at and at[i + 500] > 1.05 * at[i]]
    ok = p >= 25.0 and secs <= 300 and not rises
    emit(4, "toy training", ok, f"held-out PSNR {p:.2f} dB (>= 25), SSIM {s:.3f}, {secs:.0f} s (<= 300), "
         f"training-set loss {at[500]:.2e} @500 -> {losses[-1]:.2e} @{its[-1]}, 500-iteration windows rising > 5%: "
         f"{len(rises)}")
    assert ok


# 5 ---------------------------------------------------------------------------------


def test_c05_neus_unbiased(emit):
    rng = np.random.default_rng(5)
    fails, total = 0, 0
    for s in (8.0, 32.0, 128.0):
        for _ in range(100):
            near = float(rng.uniform(0.0, 1.0))
            far = near + float(rng.uniform(1.0, 4.0))
            # equal spacing: with jittered spacing a longer neighbouring interval can carry more mass
            t = stratified_samples(near, far, 64)
            t0 = float(rng.uniform(near + 0.1 * (far - near), far - 0.1 * (far - near)))
            slope = float(rng.uniform(0.5, 2.0))
            w = composite_sdf(t, slope * (t0 - t), np.zeros((1, 64, 3)), s).weights[0]
            k = int(np.argmax(w))
            total += 1
            fails += not (t[0, k] <= t0 <= t[0, min(k + 1, 63)])
    ok = fails == 0
    emit(5, "NeuS unbiasedness", ok, f"{total - fails}/{total} argmax samples bracket the crossing, s in {{8, 32, 128}}")
    assert ok


# 6 ---------------------------------------------------------------------------------


def _blob(rng):
    a = rng.normal(size=(700, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = rng.normal(size=(300, 3))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return np.concatenate([a * [1.0, 0.6, 0.35], b * 0.3 + [0.9, 0.4, 0.2]])


def test_c06_icp_recovery(emit):
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    worst_rot, worst_tr, fails, max_it, mono = 0.0, 0.0, 0, 0, True
    for _ in range(50):
        src = _blob(rng)
        ext = cloud_extent(src)
        axis = rng.normal(size=3)
        R = Rotation.from_rotvec(np.deg2rad(rng.uniform(0, 30)) * axis / np.linalg.norm(axis)).as_matrix()
        tv = rng.normal(size=3)
        tv *= rng.uniform(0, 0.2) * ext / np.linalg.norm(tv)
        G = RigidTransform(R, tv)
        res = icp(src, G.apply(src), IcpConfig(max_iterations=50))
        rot = res.transform.compose(G.inverse()).rotation_angle_deg()
        tr = np.linalg.norm(res.transform.translation - tv) / ext
        worst_rot, worst_tr = max(worst_rot, rot), max(worst_tr, tr)
        fails += rot >= 0.5 or tr >= 1e-3
        max_it = max(max_it, res.iterations)
        mono &= bool(np.all(np.diff(res.history) <= 0))
    secs = time.perf_counter() - t0
    ok = fails == 0 and mono and max_it <= 50 and secs < 30
    emit(6, "ICP recovery", ok, f"{50 - fails}/50 recovered; worst rot {worst_rot:.2e} deg (< 0.5), "
         f"worst trans {worst_tr:.2e} x extent (< 1e-3); max {max_it} iterations; residual non-increasing: {mono}; "
         f"{secs:.1f} s (< 30)")
    assert ok


# 7 ---------------------------------------------------------------------------------


def _direct_ssim(x, y, L, size=11, sigma=1.5):
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (g * px).sum(), (g * py).sum()
            vx, vy = (g * (px - mx) ** 2).sum(), (g * (py - my) ** 2).sum()
            cxy = (g * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_c07_metric_oracles(emit):
    rng = np.random.default_rng(7)
    gaps = {"psnr": 0.0, "ssim": 0.0, "cloud": 0.0}
    for _ in range(3):
        a = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-40, 41, a.shape), 0, 255).astype(np.uint8)
        mse = sum((int(x) - int(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        gaps["psnr"] = max(gaps["psnr"], abs(psnr(a, b).value - 10 * np.log10(255.0**2 / mse)))
        gaps["ssim"] = max(gaps["ssim"], abs(ssim(a, b).score - _direct_ssim(to_luma(a), to_luma(b), 255.0)))
        p, q = rng.random((500, 3)), rng.random((450, 3))
        D = cdist(p, q)
        r = cloud_mean_distance(p, q)
        gaps["cloud"] = max(gaps["cloud"], abs(r.mean_ab - D.min(1).mean()), abs(r.mean_ba - D.min(0).mean()),
                            abs(r.chamfer - 0.5 * (D.min(1).mean() + D.min(0).mean())))
    x = rng.random((40, 40, 3))
    c = rng.random((300, 3))
    exact = ssim(x, x).score == 1.0 and cloud_mean_distance(c, c).chamfer == 0.0
    ok = max(gaps.values()) < 1e-6 and exact
    emit(7, "metric oracles", ok, ", ".join(f"{k} gap {v:.1e}" for k, v in gaps.items())
         + f" (< 1e-6); ssim(x,x)=1 and chamfer(x,x)=0 exactly: {exact}")
    assert ok


# 8 ---------------------------------------------------------------------------------


def test_c08_scale_restoration(emit):
    prims = [Primitive("plate", (0, 0, -2), (240, 160, 4), (0.25, 0.35, 0.8)),
             Primitive("sphere", (-60, 0, 55), (25,), (0.85, 0.1, 0.1)),
             Primitive("sphere", (60, 10, 50), (20,), (0.9, 0.8, 0.1))]
    rng = np.random.default_rng(8)
    worst_tau, worst_side, lines = 0.0, 0.0, []
    for trial in range(5):
        cloud = AnalyticField(prims).surface_cloud(20_000, rng)
        k = float(10 ** rng.uniform(1, 4))
        shrunk = apply_scale(cloud, 1.0 / k)  # unknown to the detector
        s = plate_scale(detect_plate(shrunk), (240.0, 160.0))
        restored = detect_plate(apply_scale(shrunk, s))
        # the applied multiplier is 1/k, so restoration means tau * (1/k) = 1
        worst_tau = max(worst_tau, abs(s.tau / k - 1))
        side_err = max(abs(restored.sides[0] / 240 - 1), abs(restored.sides[1] / 160 - 1))
        worst_side = max(worst_side, side_err)
        lines.append(f"k={k:.0f}")
    ok = worst_tau < 1e-3 and worst_side < 0.01
    emit(8, "scale restoration", ok, f"{' '.join(lines)}: |tau/k - 1| max {worst_tau:.1e} (< 1e-3), "
         f"restored plate sides max rel err {worst_side:.1e} (< 1e-2)")
    assert ok


# 9 ---------------------------------------------------------------------------------

PEPPER = [Primitive("plate", (0, 0, -0.02), (1.2, 0.8, 0.04), (0.25, 0.35, 0.8)),
          Primitive("sphere", (-0.3, 0.0, 0.55), (0.25,), (0.85, 0.1, 0.1)),
          Primitive("sphere", (0.3, 0.05, 0.5), (0.2,), (0.9, 0.8, 0.1))]


@pytest.mark.slow
def test_c09_end_to_end_phenotyping(emit):
    orbit = OrbitSpec(count=30, radius=4, elevation=(40, 5, -20, 20, 60, -5), resolution=(64, 64), fov_deg=30,
                      target=(0, 0, 0.25))
    sc = generate_synthetic_scene(SceneSpec(PEPPER, orbit))
    hc = HashGridConfig(levels=6, table_size=2**16, features_per_entry=2, base_resolution=16, max_resolution=128)
    fcfg = FieldConfig.from_preset("hash", "density", SceneBounds((0, 0, 0.25), 1.0), hash=hc, dtype="float32",
                                   density_scale=10.0)
    field, _ = train(RadianceField(fcfg), sc.dataset,
                     TrainConfig(iterations=2000, batch_rays=256, n_coarse=48, n_fine=48, val_interval=1000))
    cloud = extract_surface_cloud(field, SceneBounds((0, 0, 0.25), 0.75), 256, threshold=15.0, mode="crossings",
                                  exterior_only=True)
    s = plate_scale(detect_plate(cloud), (240.0, 160.0))
    mm = apply_scale(cloud, s)
    seg = segment_clusters(mm, SegmentConfig(radius=10.0, min_size=50, hue_bands=((330, 360), (0, 75)),
                                             min_saturation=0.4, min_value=0.2))
    refs = [(10.0, 10.0), (8.0, 8.0)]  # sphere diameters in cm at the true 200 mm per unit
    results = measure_clusters(mm, seg, MeasureConfig(), references=refs)
    rng = np.random.default_rng(9)
    diffs, dists = [], []
    for r, c, prim in zip(results, seg.clusters, PEPPER[1:]):
        gt = AnalyticField([prim]).surface_cloud(5000, rng)
        rep = cloud_mean_distance(cloud.points[c], gt.points)
        diffs.append(r.difference_pct)
        dists.append(0.5 * (rep.mean_ab + rep.mean_ba) / (2 * prim.size[0]))
    ok = len(results) == 2 and max(diffs) < 1.0 and max(dists) < 0.02
    detail = ", ".join(f"{r.height_cm:.2f}x{r.width_cm:.2f} cm diff {d:.2f}% chamfer {c:.2%} of diameter"
                       for r, d, c in zip(results, diffs, dists))
    emit(9, "end-to-end phenotyping", ok, f"tau {s.tau:.1f}, {len(results)} clusters: {detail} "
         "(< 1% and < 2%)")
    assert ok


# 10 --------------------------------------------------------------------------------


def _numbers(path):
    """Numeric leaves of a report keyed by position; timing fields are not reproducible by nature."""
    out = {}

    def walk(node, key):
        if isinstance(node, dict):
            for k, v in node.items():
                if k not in ("wall_clock_s", "versions"):
                    walk(v, f"{key}.{k}")
        elif isinstance(node, list):
            for i, v in enumerate(node):
                walk(v, f"{key}[{i}]")
        elif isinstance(node, (int, float)) and not isinstance(node, bool):
            out[key] = node

    if path.suffix == ".json":
        walk(json.loads(path.read_text()), "")
    else:
        rows = list(csv.reader(path.open()))
        for i, row in enumerate(rows[1:]):
            for name, cell in zip(rows[0], row):
                if name != "seconds":
                    out[f"{i}.{name}"] = cell
    return out


def test_c10_determinism(emit, tmp_path):
    scene = {
        "primitives": [
            {"kind": "plate", "center": [0, 0, -0.02], "size": [1.2, 0.8, 0.04], "color": [0.25, 0.35, 0.8]},
            {"kind": "sphere", "center": [0, 0, 0.3], "size": [0.25], "color": [0.85, 0.1, 0.1]},
        ],
        "cameras": {"count": 4, "radius": 4, "elevation": [30, 10], "resolution": [24, 24]},
        "gt_points": 4000,
    }
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps(scene))
    cfg = tmp_path / "run.toml"
    cfg.write_text("seed = 11\n[field]\nlevels = 4\ntable_size = 4096\nmax_resolution = 64\n"
                   "[render]\nn_coarse = 16\nn_fine = 16\n[extract]\nresolution = 24\nthreshold = 0.5\n"
                   "[segmentation]\nhue_bands = [[330, 360], [0, 75]]\nmin_saturation = 0.4\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        base = ["--config", str(cfg), "--out", str(out)]
        gt = str(out / "clouds" / "ground_truth.ply")
        scans = out / "scans.json"
        steps = [
            ["synth", "--scene", str(spec)],
            ["train", "--data", str(out / "dataset"), "--iterations", "6", "--batch-rays", "64", "--val-interval", "3"],
            ["render", "--data", str(out / "dataset")],
            ["extract"],
            ["measure", "--cloud", gt, "--plate-mm", "240", "160"],
            ["eval", "--cloud-a", gt, "--cloud-b", str(out / "clouds" / "extracted.ply"),
             "--image-a", str(out / "dataset" / "frame_0000.png"), "--image-b", str(out / "renders" / "view_0000.png")],
            ["register", "--scans", str(scans)],
        ]
        for argv in steps:
            if argv[0] == "register":
                scans.write_text(json.dumps([{"ply_path": gt}, {"ply_path": gt, "pose": [0.01, 0, 0, 0, 0, 2]}]))
            assert run(argv[:1] + base + argv[1:]) == 0, argv[0]
    reports = sorted(p.relative_to(outs[0]) for p in (outs[0] / "reports").iterdir())
    differ = [str(r) for r in reports if _numbers(outs[0] / r) != _numbers(outs[1] / r)]
    same_files = all(hashlib.sha256((outs[0] / r).read_bytes()).digest() ==
                     hashlib.sha256((outs[1] / r).read_bytes()).digest()
                     for r in (p.relative_to(outs[0]) for p in outs[0].rglob("*"))
                     if r.parts[0] != "reports" and r.name != "scans.json" and (outs[0] / r).is_file())
    ok = not differ and same_files and len(reports) >= 14
    emit(10, "determinism", ok, f"{len(reports)} reports compared across 7 commands; differing: {differ or 'none'}; "
         f"non-report outputs bit-identical: {same_files}")
    assert ok
