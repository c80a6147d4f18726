"""Dataset (transforms JSON + PNG frames), PLY point clouds and depth PNGs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, PointCloud, estimate_scene_bounds


class DatasetError(ValueError):
    pass


class PlyError(ValueError):
    pass


@dataclass
class Dataset:
    cameras: list
    images: list  # uint8 (H, W, 3)
    field: object | None = None  # analytic oracle, synthetic scenes only

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DatasetError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if np.shape(img)[:2] != (cam.height, cam.width):
                raise DatasetError(
                    f"frame {i}: image {np.shape(img)[:2]} does not match camera {cam.height}x{cam.width}"
                )

    def __len__(self):
        return len(self.cameras)

    def bounds(self, fraction: float = 0.5):
        return estimate_scene_bounds(self.cameras, fraction)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.cameras[i] for i in idx], [self.images[i] for i in idx], self.field)


# transforms file --------------------------------------------------------------


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, optimize=False)


def save_dataset(dataset: Dataset, path, prefix: str = "frame"):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        name = f"{prefix}_{i:04d}.png"
        write_png(path / name, img)
        frames.append(
            {
                "file_path": name,
                "transform_matrix": cam.pose.tolist(),
                "fl_x": cam.focal,
                "cx": cam.cx,
                "cy": cam.cy,
                "w": cam.width,
                "h": cam.height,
            }
        )
    first = dataset.cameras[0]
    doc = {"camera_angle_x": first.fov_x, "frames": frames}
    with open(path / "transforms.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def _resolve_image(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.suffix == "" and not p.exists():
        p = p.with_suffix(".png")
    return p


def _pose_from(matrix, index: int) -> np.ndarray:
    try:
        m = np.asarray(matrix, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetError(f"frame {index}: transform_matrix is not numeric") from None
    if m.shape != (4, 4):
        raise DatasetError(f"frame {index}: transform_matrix must be 4x4, got {m.shape}")
    rot = m[:3, :3]
    if not np.all(np.isfinite(m)) or abs(np.linalg.det(rot)) < 1e-9:
        raise DatasetError(f"frame {index}: rotation block is not invertible")
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
        # tolerate float32-precision exports by projecting onto the nearest rotation
        u, _, vt = np.linalg.svd(rot)
        if np.linalg.det(u @ vt) < 0:
            raise DatasetError(f"frame {index}: rotation block is a reflection")
        m = m.copy()
        m[:3, :3] = u @ vt
    if not np.allclose(m[3], [0, 0, 0, 1]):
        raise DatasetError(f"frame {index}: last matrix row must be (0, 0, 0, 1)")
    m[3] = [0.0, 0.0, 0.0, 1.0]
    return m


def load_dataset(path) -> Dataset:
    root = Path(path)
    tf = root / "transforms.json" if root.is_dir() else root
    root = tf.parent
    try:
        with open(tf) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"no transforms file at {tf}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed transforms file: {exc}") from None
    if "frames" not in doc:
        raise DatasetError("transforms file has no 'frames'")
    cameras, images = [], []
    for i, frame in enumerate(doc["frames"]):
        if "file_path" not in frame or "transform_matrix" not in frame:
            raise DatasetError(f"frame {i}: needs file_path and transform_matrix")
        img_path = _resolve_image(root, frame["file_path"])
        if not img_path.exists():
            raise DatasetError(f"frame {i}: missing image file {img_path}")
        img = read_png(img_path)
        h, w = img.shape[:2]
        if ("w" in frame and int(frame["w"]) != w) or ("h" in frame and int(frame["h"]) != h):
            raise DatasetError(f"frame {i}: image is {w}x{h} but frame declares {frame.get('w')}x{frame.get('h')}")
        pose = _pose_from(frame["transform_matrix"], i)
        if "fl_x" in frame:
            focal = float(frame["fl_x"])
        elif "camera_angle_x" in doc:
            focal = 0.5 * w / np.tan(0.5 * float(doc["camera_angle_x"]))
        else:
            raise DatasetError(f"frame {i}: no focal length (camera_angle_x or fl_x)")
        cx = float(frame.get("cx", w / 2.0))
        cy = float(frame.get("cy", h / 2.0))
        cameras.append(Camera(w, h, focal, cx, cy, pose))
        images.append(img)
    if not cameras:
        raise DatasetError("transforms file lists no frames")
    return Dataset(cameras, images)


# PLY --------------------------------------------------------------------------

_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1",
}


def save_ply(cloud: PointCloud, path, binary: bool = True):
    pts = cloud.points.astype(np.float32)
    has_color = cloud.colors is not None
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    rgb = np.round(np.clip(cloud.colors, 0, 1) * 255).astype(np.uint8) if has_color else None
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if has_color:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(len(pts), dtype=fields)
            rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
            if has_color:
                rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
            fh.write(rec.tobytes())
        else:
            lines = []
            for i in range(len(pts)):
                row = " ".join(repr(float(v)) for v in pts[i])
                if has_color:
                    row += " " + " ".join(str(int(v)) for v in rgb[i])
                lines.append(row)
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def load_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("unsupported PLY layout: missing ply magic or end_header")
    nl = data.find(b"\n", end)
    body = data[nl + 1 :] if nl >= 0 else b""
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    count = None
    props = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] != "vertex" or count is not None:
                raise PlyError(f"unsupported PLY layout: element {tok[1]}")
            count = int(tok[2])
        elif tok[0] == "property":
            if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                raise PlyError(f"unsupported PLY layout: property {' '.join(tok[1:])}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PlyError(f"unsupported PLY layout: {line.strip()}")
    names = [p[0] for p in props]
    if count is None or names[:3] != ["x", "y", "z"] or names[3:] not in ([], ["red", "green", "blue"]):
        raise PlyError(f"unsupported PLY layout: vertex properties {names}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY layout: format {fmt}")
    has_color = len(names) == 6
    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if len(body) < dtype.itemsize * count:
            raise PlyError("unexpected end of file")
        rec = np.frombuffer(body, dtype=dtype, count=count)
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0 if has_color else None
    else:
        rows = body.decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < count:
            raise PlyError("unexpected end of file")
        try:
            arr = np.array([r.split() for r in rows[:count]], dtype=np.float64).reshape(count, len(names))
        except ValueError:
            raise PlyError("malformed PLY vertex row") from None
        pts = arr[:, :3].astype(np.float32).astype(np.float64) if props[0][1] == "f4" else arr[:, :3]
        cols = arr[:, 3:6] / 255.0 if has_color else None
    return PointCloud(pts, cols)


def save_depth_png(path, depth: np.ndarray, scale: float = 1000.0):
    """16-bit PNG of depth * scale (millidepth by default), clipped to the uint16 range."""
    d = np.round(np.clip(np.asarray(depth) * scale, 0, 65535)).astype(np.uint16)
    Image.fromarray(d).save(path)


def load_depth_png(path, scale: float = 1000.0) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / scale


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
