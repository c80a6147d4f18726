import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phenofield.geometry import (Camera, DegenerateRigError, PointCloud, SceneBounds, camera_ray, camera_rays,
                                 estimate_scene_bounds, look_at, orbit_poses)
from phenofield.io import (Dataset, DatasetError, PlyError, load_dataset, load_depth_png, load_ply, save_dataset,
                           save_depth_png, save_ply)
from phenofield.synthetic import OrbitSpec, Primitive, SceneSpec, SceneSpecError, generate_synthetic_scene

from conftest import random_rotation


def _cam(pose=None, w=32, h=24, fov=np.deg2rad(50)):
    return Camera.from_fov(w, h, fov, np.eye(4) if pose is None else pose)


class TestCamera:
    def test_rejects_bad_pose(self):
        bad = np.eye(4)
        bad[0, 1] = 0.1
        with pytest.raises(ValueError):
            _cam(bad)
        bad = np.eye(4)
        bad[3, 0] = 1.0
        with pytest.raises(ValueError):
            _cam(bad)
        with pytest.raises(ValueError):
            Camera(4, 4, 0.0, 2, 2, np.eye(4))

    def test_center_pixel_looks_down_minus_z(self):
        cam = _cam()
        ray = camera_ray(cam, (cam.cx, cam.cy), SceneBounds(np.zeros(3), 1.0))
        np.testing.assert_allclose(ray.direction, [0, 0, -1], atol=1e-15)

    def test_slab_interval(self):
        pose = np.eye(4)
        pose[2, 3] = 4.0
        cam = _cam(pose)
        ray = camera_ray(cam, (cam.cx, cam.cy), SceneBounds(np.zeros(3), 1.0))
        assert ray.t_near == pytest.approx(3.0, abs=1e-12)
        assert ray.t_far == pytest.approx(5.0, abs=1e-12)

    def test_miss_is_zero_length(self):
        pose = np.eye(4)
        pose[:3, 3] = [10, 0, 4]
        cam = _cam(pose)
        ray = camera_ray(cam, (cam.cx, cam.cy), SceneBounds(np.zeros(3), 1.0))
        assert not ray.hit and ray.t_near == ray.t_far

    def test_inside_cube_clamps_near(self):
        cam = _cam()
        ray = camera_ray(cam, (cam.cx, cam.cy), SceneBounds(np.zeros(3), 1.0))
        assert 0 < ray.t_near < 1e-3 and ray.t_far == pytest.approx(1.0)

    def test_pixel_outside_image(self):
        with pytest.raises(ValueError):
            camera_ray(_cam(), (-1, 3), SceneBounds(np.zeros(3), 1.0))

    def test_reprojection(self, rng):
        for _ in range(20):
            eye = rng.normal(size=3) * 3 + np.array([0, 0, 5])
            cam = _cam(look_at(eye, rng.normal(size=3) * 0.2))
            px = rng.uniform([0, 0], [cam.width, cam.height], size=(50, 2))
            rays = camera_rays(cam, SceneBounds(np.zeros(3), 2.0), px)
            np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
            pts = rays.origins + 2.7 * rays.directions
            np.testing.assert_allclose(cam.project(pts), px, atol=1e-6)


@given(st.integers(0, 10_000))
def test_direction_norm_property(seed):
    rng = np.random.default_rng(seed)
    cam = _cam(look_at(rng.normal(size=3) * 4 + 0.01, np.zeros(3)))
    rays = camera_rays(cam, SceneBounds(np.zeros(3), 1.0))
    assert np.abs(np.linalg.norm(rays.directions, axis=1) - 1).max() < 1e-9
    assert np.all(rays.near <= rays.far) and np.all(rays.near >= 0)


class TestSceneBounds:
    def test_circle_rig(self):
        cams = [_cam(p) for p in orbit_poses(4, 2.0, (0.0,))]
        b = estimate_scene_bounds(cams)
        np.testing.assert_allclose(b.center, 0, atol=1e-9)
        assert b.half_extent == pytest.approx(1.0)

    def test_two_skew_lines(self):
        # oracle: closest points of two lines p1 + s d1, p2 + t d2
        p1, p2 = np.array([0.0, -3.0, 0.0]), np.array([3.0, 0.0, 1.0])
        c1, c2 = look_at(p1, [0, 0, 0]), look_at(p2, [0, 0, 1])
        d1, d2 = -c1[:3, 2], -c2[:3, 2]
        w0 = p1 - p2
        a, b, c, d, e = d1 @ d1, d1 @ d2, d2 @ d2, d1 @ w0, d2 @ w0
        s = (b * e - c * d) / (a * c - b * b)
        t = (a * e - b * d) / (a * c - b * b)
        mid = 0.5 * ((p1 + s * d1) + (p2 + t * d2))
        got = estimate_scene_bounds([_cam(c1), _cam(c2)]).center
        np.testing.assert_allclose(got, mid, atol=1e-9)

    def test_parallel_axes(self):
        a, b = np.eye(4), np.eye(4)
        b[0, 3] = 1.0
        with pytest.raises(DegenerateRigError, match="degenerate camera rig"):
            estimate_scene_bounds([_cam(a), _cam(b)])

    def test_single_camera(self):
        with pytest.raises(DegenerateRigError):
            estimate_scene_bounds([_cam()])

    @given(st.integers(0, 10_000))
    def test_rigid_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        poses = orbit_poses(6, 3.0, (20.0, -10.0), center=rng.normal(size=3))
        R = random_rotation(rng)
        G = np.eye(4)
        G[:3, :3], G[:3, 3] = R, rng.normal(size=3) * 5
        b0 = estimate_scene_bounds([_cam(p) for p in poses])
        b1 = estimate_scene_bounds([_cam(G @ p) for p in poses])
        np.testing.assert_allclose(b1.center, R @ b0.center + G[:3, 3], atol=1e-9)
        assert b1.half_extent == pytest.approx(b0.half_extent, abs=1e-9)


def _tiny_dataset(rng):
    cams = [_cam(p, 8, 6) for p in orbit_poses(2, 3.0, (15.0,))]
    imgs = [rng.integers(0, 256, (6, 8, 3), dtype=np.uint8) for _ in cams]
    return Dataset(cams, imgs)


class TestDataset:
    def test_round_trip(self, tmp_path, rng):
        ds = _tiny_dataset(rng)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        for a, b in zip(ds.cameras, back.cameras):
            assert np.array_equal(a.pose, b.pose)
            assert (a.focal, a.cx, a.cy) == (b.focal, b.cx, b.cy)
        for a, b in zip(ds.images, back.images):
            assert np.array_equal(a, b)

    def test_missing_image_names_frame(self, tmp_path, rng):
        save_dataset(_tiny_dataset(rng), tmp_path)
        (tmp_path / "frame_0001.png").unlink()
        with pytest.raises(DatasetError, match="frame 1: missing image"):
            load_dataset(tmp_path)

    def test_singular_rotation(self, tmp_path, rng):
        save_dataset(_tiny_dataset(rng), tmp_path)
        doc = json.loads((tmp_path / "transforms.json").read_text())
        doc["frames"][0]["transform_matrix"][0][:3] = [0, 0, 0]
        (tmp_path / "transforms.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="frame 0: rotation block is not invertible"):
            load_dataset(tmp_path)

    def test_dimension_mismatch(self, tmp_path, rng):
        save_dataset(_tiny_dataset(rng), tmp_path)
        doc = json.loads((tmp_path / "transforms.json").read_text())
        doc["frames"][1]["w"] = 9
        (tmp_path / "transforms.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="frame 1"):
            load_dataset(tmp_path)

    def test_hand_written_identity_pose(self, tmp_path):
        from phenofield.io import write_png

        write_png(tmp_path / "a.png", np.zeros((4, 4, 3), np.uint8))
        doc = {"camera_angle_x": np.pi / 2, "frames": [{"file_path": "a", "transform_matrix": np.eye(4).tolist()}]}
        (tmp_path / "transforms.json").write_text(json.dumps(doc))
        cam = load_dataset(tmp_path).cameras[0]
        np.testing.assert_array_equal(cam.position, 0)
        assert cam.focal == pytest.approx(2.0)
        ray = camera_ray(cam, (2, 2), SceneBounds(np.array([0, 0, -3.0]), 1.0))
        np.testing.assert_allclose(ray.direction, [0, 0, -1], atol=1e-15)
        assert ray.t_near == pytest.approx(2.0)

    def test_length_mismatch(self, rng):
        ds = _tiny_dataset(rng)
        with pytest.raises(DatasetError):
            Dataset(ds.cameras, ds.images[:1])


class TestPly:
    def test_ascii_fixture(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                     "property float z\nend_header\n0 0 0\n1 2 3\n-0.5 0.25 4\n")
        c = load_ply(p)
        np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 2, 3], [-0.5, 0.25, 4]])
        assert c.colors is None

    def test_binary_round_trip_bit_exact(self, tmp_path, rng):
        pts = rng.normal(size=(10_000, 3)).astype(np.float32).astype(np.float64)
        cols = rng.integers(0, 256, (10_000, 3)) / 255.0
        save_ply(PointCloud(pts, cols), tmp_path / "b.ply")
        back = load_ply(tmp_path / "b.ply")
        assert np.array_equal(back.points, pts)
        assert np.array_equal(back.colors, cols)

    def test_ascii_round_trip(self, tmp_path, rng):
        pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
        save_ply(PointCloud(pts), tmp_path / "c.ply", binary=False)
        assert np.array_equal(load_ply(tmp_path / "c.ply").points, pts)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\n"
                     "property float z\nend_header\n" + "1 1 1\n" * 4)
        with pytest.raises(PlyError, match="unexpected end of file"):
            load_ply(p)
        save_ply(PointCloud(np.ones((5, 3))), p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(PlyError, match="unexpected end of file"):
            load_ply(p)

    def test_unsupported_layout(self, tmp_path):
        p = tmp_path / "f.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                     "property float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n")
        with pytest.raises(PlyError, match="unsupported PLY layout"):
            load_ply(p)

    def test_depth_png(self, tmp_path, rng):
        d = rng.uniform(0, 10, (5, 7))
        save_depth_png(tmp_path / "d.png", d)
        np.testing.assert_allclose(load_depth_png(tmp_path / "d.png"), d, atol=5e-4)


def test_point_cloud_invariants():
    with pytest.raises(ValueError):
        PointCloud(np.ones((3, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, np.nan]]))


class TestSynthetic:
    def _spec(self, prims, **orbit):
        return SceneSpec(prims, OrbitSpec(**{"count": 4, "radius": 4.0, "resolution": (16, 16), **orbit}))

    def test_red_sphere_center_pixel(self):
        sc = generate_synthetic_scene(self._spec([Primitive("sphere", (0, 0, 0), (0.8,), (1.0, 0.0, 0.0))]))
        img = sc.dataset.images[0]
        assert np.abs(img[8, 8].astype(int) - [255, 0, 0]).max() <= 1

    def test_zero_density_is_background(self):
        sc = generate_synthetic_scene(self._spec([Primitive("sphere", (0, 0, 0), (0.8,), density=0.0)]))
        assert all(np.all(im == 255) for im in sc.dataset.images)
        assert len(sc.ground_truth) == 0

    def test_ground_truth_on_sphere(self):
        sc = generate_synthetic_scene(self._spec([Primitive("sphere", (0.1, 0, 0), (0.6,))]))
        r = np.linalg.norm(sc.ground_truth.points - [0.1, 0, 0], axis=1)
        assert np.abs(r - 0.6).max() < 1e-6

    def test_deterministic(self):
        spec = self._spec([Primitive("box", (0, 0, 0), (0.5, 0.6, 0.7))])
        a, b = generate_synthetic_scene(spec), generate_synthetic_scene(spec)
        assert all(np.array_equal(x, y) for x, y in zip(a.dataset.images, b.dataset.images))
        assert np.array_equal(a.ground_truth.points, b.ground_truth.points)

    def test_spec_errors(self):
        with pytest.raises(SceneSpecError, match="primitives"):
            SceneSpec([])
        with pytest.raises(SceneSpecError, match="primitives.kind"):
            SceneSpec.from_dict({"primitives": [{"kind": "torus", "center": [0, 0, 0], "size": [1]}]})
        with pytest.raises(SceneSpecError, match="cameras.radius"):
            SceneSpec.from_dict({"primitives": [{"kind": "sphere", "center": [0, 0, 0], "size": [1]}],
                                 "cameras": {"radius": -1}})
