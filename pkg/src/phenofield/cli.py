"""``phenofield`` command line: one subcommand per pipeline stage.

Every run writes into a fixed layout under the output directory::

    checkpoints/   field checkpoints
    renders/       rendered colour PNGs and 16-bit depth PNGs
    clouds/        PLY point clouds
    reports/       JSON/CSV reports and one manifest per command

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or input spec,
3 training divergence or registration without overlap.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, ConfigError, digest, load_config, out_dirs

EXIT_RUNTIME, EXIT_CONFIG, EXIT_DIVERGED = 1, 2, 3
MANIFEST_SUFFIX = "_manifest.json"


class StageError(RuntimeError):
    def __init__(self, message, code=EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


# shared helpers -----------------------------------------------------------------


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import PIL
    import scipy

    return {
        "phenofield": __version__,
        "config_schema": SCHEMA_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pillow": PIL.__version__,
    }


def _write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs: list, seconds: float):
    files = {}
    for p in sorted(set(outputs)):
        p = Path(p)
        if p.exists():
            files[str(p.relative_to(out))] = _sha256(p)
    _json_dump(
        {
            "command": command,
            "inputs": inputs,
            "config": cfg,
            "config_digest": digest(cfg),
            "seed": cfg["seed"],
            "wall_clock_s": seconds,
            "versions": _versions(),
            "outputs": files,
        },
        out / "reports" / f"{command}{MANIFEST_SUFFIX}",
    )


def _require(path, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what}: path not given")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what}: {p} does not exist")
    return p


def _field_config(cfg: dict, bounds):
    from .encoding import HashGridConfig
    from .field import FieldConfig

    name, head = {"classic": ("classic", "density"), "hash-density": ("hash", "density"),
                  "hash-sdf": ("hash", "sdf")}[cfg["preset"]]
    f = cfg["field"]
    hc = HashGridConfig(levels=f["levels"], table_size=f["table_size"], features_per_entry=f["features_per_entry"],
                        base_resolution=f["base_resolution"], max_resolution=f["max_resolution"])
    return FieldConfig.from_preset(name, head, bounds, hash=hc, dtype=f["dtype"], seed=cfg["seed"],
                                  density_scale=f["density_scale"])


def _render_config(cfg: dict):
    from .render import RenderConfig

    r = cfg["render"]
    return RenderConfig(n_coarse=r["n_coarse"], n_fine=r["n_fine"], background=tuple(r["background"]))


def _checkpoint(args, out: Path) -> Path:
    return _require(args.checkpoint or out / "checkpoints" / "final.ckpt", "checkpoint")


# commands -----------------------------------------------------------------------


def cmd_synth(args, cfg, out, dirs):
    from .io import save_dataset, save_ply
    from .synthetic import SceneSpec, generate_synthetic_scene

    path = _require(args.scene, "scene")
    try:
        if path.suffix == ".toml":
            from .config import tomllib

            doc = tomllib.loads(path.read_text())
        else:
            doc = json.loads(path.read_text())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"scene: malformed scene file ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("scene: expected a table of scene fields")
    doc.setdefault("seed", cfg["seed"])
    spec = SceneSpec.from_dict(doc)
    scene = generate_synthetic_scene(spec)
    data_dir = out / "dataset"
    save_dataset(scene.dataset, data_dir)
    gt = dirs["clouds"] / "ground_truth.ply"
    save_ply(scene.ground_truth, gt)
    outputs = sorted(data_dir.iterdir()) + [gt]
    return {"scene": str(path)}, outputs


def cmd_train(args, cfg, out, dirs):
    from .field import RadianceField, save_checkpoint
    from .io import load_dataset
    from .train import TrainConfig, train

    dataset = load_dataset(_require(cfg["data"], "data"))
    bounds = dataset.bounds(cfg["train"]["bounds_fraction"])
    field = RadianceField(_field_config(cfg, bounds))
    t = cfg["train"]
    r = cfg["render"]
    tcfg = TrainConfig(
        iterations=t["iterations"], batch_rays=t["batch_rays"], lr_tables=t["lr_tables"], lr_network=t["lr_network"],
        decay=t["decay"], beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"], seed=cfg["seed"],
        eikonal_weight=t["eikonal_weight"], val_interval=t["val_interval"], n_coarse=r["n_coarse"],
        n_fine=r["n_fine"], workers=args.workers,
    )
    val = None
    if args.val:
        val = load_dataset(_require(args.val, "val"))
    field, log = train(field, dataset, tcfg, val_dataset=val, checkpoint_dir=dirs["checkpoints"],
                       background=tuple(r["background"]))
    final = dirs["checkpoints"] / "final.ckpt"
    save_checkpoint(field, final)
    csv_path = dirs["reports"] / "train_log.csv"
    log.to_csv(csv_path)
    summary = {
        "iterations": t["iterations"],
        "final_loss": log.losses[-1] if log.losses else None,
        "skipped_steps": log.skipped,
        "param_bytes": int(sum(p.nbytes for p in field.params.values())),
    }
    if log.rows:
        summary.update(psnr_db=log.rows[-1][2], ssim=log.rows[-1][3])
    rep = dirs["reports"] / "train.json"
    _json_dump(summary, rep)
    ckpts = sorted(dirs["checkpoints"].glob("*.ckpt"))
    return {"data": cfg["data"], "val": args.val}, ckpts + [csv_path, rep]


def cmd_render(args, cfg, out, dirs):
    from .field import load_checkpoint
    from .io import load_dataset, save_depth_png, write_png
    from .metrics import psnr, ssim
    from .render import render_image

    ckpt = _checkpoint(args, out)
    field = load_checkpoint(ckpt)
    dataset = load_dataset(_require(cfg["data"], "data"))
    rcfg = _render_config(cfg)
    outputs, views = [], []
    for i, cam in enumerate(dataset.cameras):
        img, depth = render_image(field, cam, rcfg, None, field.bounds)
        cp = dirs["renders"] / f"view_{i:04d}.png"
        dp = dirs["renders"] / f"depth_{i:04d}.png"
        write_png(cp, img)
        save_depth_png(dp, depth, cfg["render"]["depth_scale"])
        gt = np.asarray(dataset.images[i], dtype=np.float64) / 255.0
        p = psnr(img, gt, 1.0)
        views.append({"view": i, "psnr_db": p.value, "ssim": ssim(img, gt, max_val=1.0).score})
        outputs += [cp, dp]
    rep = dirs["reports"] / "render.json"
    _json_dump({"views": views}, rep)
    return {"checkpoint": str(ckpt), "data": cfg["data"]}, outputs + [rep]


def cmd_extract(args, cfg, out, dirs):
    from .field import extract_surface_cloud, load_checkpoint
    from .geometry import SceneBounds
    from .io import save_ply

    ckpt = _checkpoint(args, out)
    field = load_checkpoint(ckpt)
    e = cfg["extract"]
    if e["center"] or e["half_extent"] > 0:
        if len(e["center"]) != 3 or e["half_extent"] <= 0:
            raise ConfigError("extract.center/half_extent: need a 3-vector and a positive half extent")
        box = SceneBounds(np.array(e["center"], dtype=float), e["half_extent"])
    else:
        box = field.bounds
    cloud = extract_surface_cloud(field, box, e["resolution"], threshold=e["threshold"], iso=e["iso"], mode=e["mode"],
                                  exterior_only=e["exterior_only"])
    ply = dirs["clouds"] / "extracted.ply"
    save_ply(cloud, ply)
    rep = dirs["reports"] / "extract.json"
    _json_dump({"points": len(cloud), "extent": cloud.extent}, rep)
    return {"checkpoint": str(ckpt)}, [ply, rep]


def cmd_register(args, cfg, out, dirs):
    from .io import save_ply
    from .registration import IcpConfig, fuse_scans, load_scan_manifest, write_fusion_report

    path = _require(args.scans, "scans")
    clouds, poses = load_scan_manifest(path)
    i = cfg["icp"]
    icfg = IcpConfig(i["max_iterations"], i["tolerance"], i["max_distance"], i["trim"])
    merged, transforms, reports = fuse_scans(clouds, poses, icfg, i["voxel_fraction"])
    ply = dirs["clouds"] / "fused.ply"
    save_ply(merged, ply)
    csv_path = dirs["reports"] / "fusion.csv"
    write_fusion_report(reports, csv_path)
    rep = dirs["reports"] / "register.json"
    _json_dump({"points": len(merged), "transforms": [T.matrix().tolist() for T in transforms],
                "rms": [r.rms for r in reports]}, rep)
    return {"scans": str(path)}, [ply, csv_path, rep]


def cmd_measure(args, cfg, out, dirs):
    from .geometry import PointCloud
    from .io import load_ply, save_ply
    from .phenotype import (MeasureConfig, MeasurementReport, PlateConfig, SegmentConfig, apply_scale, detect_plate,
                            measure_clusters, plate_scale, segment_clusters)

    src = args.cloud or (dirs["clouds"] / "extracted.ply")
    cloud = load_ply(_require(src, "cloud"))
    p = cfg["plate"]
    plate = detect_plate(cloud, PlateConfig(threshold=p["threshold"], iterations=p["iterations"],
                                            min_inliers=p["min_inliers"],
                                            min_inlier_fraction=p["min_inlier_fraction"], seed=cfg["seed"]))
    scale = plate_scale(plate, tuple(p["size_mm"]))
    mm = apply_scale(cloud, scale)
    s = cfg["segmentation"]
    bands = tuple(tuple(b) for b in s["hue_bands"]) or None
    seg = segment_clusters(mm, SegmentConfig(radius=s["radius"], min_size=s["min_size"], hue_bands=bands,
                                             min_saturation=s["min_saturation"], min_value=s["min_value"]))
    m = cfg["measure"]
    refs = m["references_cm"] or None
    clusters = measure_clusters(mm, seg, MeasureConfig(gravity=tuple(m["gravity"]), robust=m["robust"]), refs)
    report = MeasurementReport(scale.tau, tuple(float(x) * scale.tau for x in plate.sides), clusters)
    rep = dirs["reports"] / "measurement.json"
    _json_dump(report.to_dict(), rep)
    outputs = [rep]
    if args.annotate:
        palette = np.array([[0.6, 0.6, 0.6]] + [[(37 * k % 255) / 255, (91 * k % 255) / 255, (173 * k % 255) / 255]
                                                for k in range(1, len(seg.clusters) + 1)])
        colors = palette[seg.labels + 1]
        ann = dirs["clouds"] / "annotated.ply"
        save_ply(PointCloud(mm.points, colors), ann)
        outputs.append(ann)
    return {"cloud": str(src)}, outputs


def cmd_eval(args, cfg, out, dirs):
    from .io import load_ply, read_png, write_png
    from .metrics import cloud_mean_distance, psnr, ssim

    result = {"psnr_db": None, "ssim": None, "mean_dist_ab_mm": None, "mean_dist_ba_mm": None, "chamfer_mm": None}
    outputs = []
    inputs = {}
    if bool(args.image_a) != bool(args.image_b):
        raise ConfigError("image-a/image-b: give both images or neither")
    if bool(args.cloud_a) != bool(args.cloud_b):
        raise ConfigError("cloud-a/cloud-b: give both clouds or neither")
    if not args.image_a and not args.cloud_a:
        raise ConfigError("eval: nothing to compare (pass images and/or clouds)")
    if args.image_a:
        a = read_png(_require(args.image_a, "image-a"))
        b = read_png(_require(args.image_b, "image-b"))
        p = psnr(a, b)
        s = ssim(a, b)
        result["psnr_db"] = p.value
        result["ssim"] = s.score
        if args.ssim_map:
            mp = dirs["reports"] / "ssim_map.png"
            write_png(mp, np.repeat(np.clip(s.map, 0.0, 1.0)[..., None], 3, axis=2))
            outputs.append(mp)
        inputs.update(image_a=args.image_a, image_b=args.image_b)
    if args.cloud_a:
        ca = load_ply(_require(args.cloud_a, "cloud-a"))
        cb = load_ply(_require(args.cloud_b, "cloud-b"))
        d = cloud_mean_distance(ca, cb)
        result.update(d.to_dict())
        hist = dirs["reports"] / "distance_histogram.csv"
        with open(hist, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(d.bin_edges[:-1], d.bin_edges[1:], d.histogram):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        outputs.append(hist)
        inputs.update(cloud_a=args.cloud_a, cloud_b=args.cloud_b)
    rep = dirs["reports"] / "eval.json"
    _json_dump(result, rep)
    return inputs, outputs + [rep]


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "extract": cmd_extract,
    "register": cmd_register,
    "measure": cmd_measure,
    "eval": cmd_eval,
}


# argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phenofield", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version",
                    version=f"phenofield {__version__} (config schema {SCHEMA_VERSION})")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--out", help="output directory (config: out)")
    common.add_argument("--seed", type=int, help="config: seed")
    common.add_argument("--workers", type=int, default=1, help="parallel workers; 1 is fully deterministic")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scene into a dataset")
    p.add_argument("--scene", required=True, help="scene description (JSON or TOML)")

    p = sub.add_parser("train", parents=[common], help="fit a radiance field to a dataset")
    p.add_argument("--data", help="dataset directory or transforms JSON (config: data)")
    p.add_argument("--val", help="held-out dataset for validation")
    p.add_argument("--preset", choices=["classic", "hash-density", "hash-sdf"])
    p.add_argument("--iterations", type=int, dest="train.iterations")
    p.add_argument("--batch-rays", type=int, dest="train.batch_rays")
    p.add_argument("--val-interval", type=int, dest="train.val_interval")

    p = sub.add_parser("render", parents=[common], help="render dataset cameras from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset whose cameras are rendered (config: data)")

    p = sub.add_parser("extract", parents=[common], help="extract a surface point cloud")
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", type=int, dest="extract.resolution")
    p.add_argument("--threshold", type=float, dest="extract.threshold")
    p.add_argument("--mode", choices=["cells", "crossings"], dest="extract.mode")
    p.add_argument("--exterior-only", action="store_const", const=True, dest="extract.exterior_only",
                   help="drop surfaces facing enclosed cavities")

    p = sub.add_parser("register", parents=[common], help="align and fuse posed scans")
    p.add_argument("--scans", required=True, help="JSON list of {ply_path, pose}")
    p.add_argument("--max-iterations", type=int, dest="icp.max_iterations")
    p.add_argument("--trim", type=float, dest="icp.trim")

    p = sub.add_parser("measure", parents=[common], help="plate scale, segmentation and trait measurement")
    p.add_argument("--cloud", help="input PLY (default clouds/extracted.ply)")
    p.add_argument("--plate-mm", type=float, nargs=2, dest="plate.size_mm")
    p.add_argument("--annotate", action="store_true", help="also write clouds/annotated.ply")

    p = sub.add_parser("eval", parents=[common], help="image and point-cloud metrics")
    p.add_argument("--image-a")
    p.add_argument("--image-b")
    p.add_argument("--cloud-a")
    p.add_argument("--cloud-b")
    p.add_argument("--ssim-map", action="store_true", help="also write reports/ssim_map.png")
    return ap


_OVERRIDES = ("seed", "out", "data", "preset")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        if args.workers < 1:
            raise ConfigError("workers: must be >= 1")
        overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
        overrides.update({k: v for k, v in vars(args).items() if "." in k})
        cfg = load_config(args.config, overrides)
        out = Path(cfg["out"])
        dirs = out_dirs(out)
        start = time.perf_counter()
        inputs, outputs = COMMANDS[command](args, cfg, out, dirs)
        _write_manifest(out, command, cfg, inputs, outputs, time.perf_counter() - start)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code(exc)
        print(f"phenofield {command}: error: {exc}", file=sys.stderr)
        return code
    return 0


def exit_code(exc: BaseException) -> int:
    from .field import FieldDivergedError
    from .registration import NoOverlapError
    from .synthetic import SceneSpecError

    if isinstance(exc, (FieldDivergedError, NoOverlapError)):
        return EXIT_DIVERGED
    if isinstance(exc, (ConfigError, SceneSpecError)):
        return EXIT_CONFIG
    if isinstance(exc, StageError):
        return exc.code
    return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
