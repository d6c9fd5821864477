"""Tests for the synthetic scene generator and its analytic ground truth."""

from __future__ import annotations

import math
import os

import numpy as np
import pytest

from mvstereo import geometry, synthkit
from mvstereo.errors import DimensionMismatchError, UnknownPresetError
from mvstereo.ioformats import load_config, load_label_map, load_scene, read_depth_map
from mvstereo.synthkit import NoiseField, PRESETS, generate, score, surface_distance, write_scene


@pytest.fixture(scope="module")
def three_planes():
    return generate("three-planes", seed=3)


# ---------------------------------------------------------------------------
# presets and determinism


def test_all_presets_render():
    for preset in PRESETS:
        scene = generate(preset, seed=1)
        assert scene.preset == preset
        assert scene.view_count == 4
        for v in range(scene.view_count):
            assert np.all(np.isfinite(scene.gt_depth[v]))
            assert np.all(scene.gt_depth[v] > 0.0)
            assert np.all(scene.gt_labels[v].labels > 0)
            samples = scene.images[v].samples
            assert samples.min() >= 0.0 and samples.max() <= 1.0


def test_unknown_preset_rejected():
    with pytest.raises(UnknownPresetError):
        generate("four-planes", seed=0)


def test_generation_is_deterministic():
    a = generate("slanted-box", seed=9)
    b = generate("slanted-box", seed=9)
    c = generate("slanted-box", seed=10)
    for v in range(a.view_count):
        assert np.array_equal(a.images[v].samples, b.images[v].samples)
        assert np.array_equal(a.gt_depth[v], b.gt_depth[v])
    assert not np.array_equal(a.images[0].samples, c.images[0].samples)
    # geometry is seed-independent; only the texture changes
    assert np.array_equal(a.gt_depth[0], c.gt_depth[0])


# ---------------------------------------------------------------------------
# rig geometry


def test_rig_cameras_are_verged_rotations(three_planes):
    target = np.array([0.0, 0.0, 0.28])
    centers = []
    for cam in three_planes.cameras:
        assert np.allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(cam.R), 1.0, atol=1e-12)
        forward = cam.R[2]
        aim = target - cam.C
        assert np.allclose(forward, aim / np.linalg.norm(aim), atol=1e-12)
        assert cam.K[0, 0] == 240.0 and cam.K[1, 1] == 240.0
        assert (cam.width, cam.height) == (160, 120)
        centers.append(cam.C)
    centers = np.array(centers)
    assert len({tuple(np.round(c, 9)) for c in centers}) == 4  # distinct positions
    assert np.ptp(centers[:, 0]) > 0.0 and np.ptp(centers[:, 1]) > 0.0  # 2x2 layout


# ---------------------------------------------------------------------------
# ground-truth consistency (independent plane-equation oracle)


def _plane_by_id(scene, instance_id):
    for plane in scene.planes:
        if plane.instance_id == instance_id:
            return plane
    raise AssertionError(f"no plane with id {instance_id}")


@pytest.mark.parametrize("preset", PRESETS)
def test_depth_maps_satisfy_plane_equations(preset):
    scene = generate(preset, seed=2)
    rng = np.random.default_rng(77)
    for v in range(scene.view_count):
        cam = scene.cameras[v]
        xs = rng.integers(0, cam.width, size=200)
        ys = rng.integers(0, cam.height, size=200)
        for x, y in zip(xs, ys):
            d = scene.gt_depth[v][y, x]
            X = geometry.unproject(cam, (float(x), float(y)), float(d))
            plane = _plane_by_id(scene, int(scene.gt_labels[v].labels[y, x]))
            # the lifted point lies on the labelled plane, inside its bounds
            assert abs(float(plane.normal @ (X - plane.point))) < 1e-9
            assert plane.contains(X[None, :])[0]
            # and re-projects to the pixel it came from, at that camera depth
            pix, depth = geometry.project(cam, X[None, :])
            assert np.allclose(pix[0], (x, y), atol=1e-8)
            assert np.isclose(depth[0], d, atol=1e-12)


def test_normals_are_camera_frame_and_facing(three_planes):
    scene = three_planes
    for v in range(scene.view_count):
        cam = scene.cameras[v]
        normal = scene.gt_normal[v]
        assert np.allclose(np.linalg.norm(normal, axis=-1), 1.0, atol=1e-12)
        labels = scene.gt_labels[v].labels
        for instance_id in np.unique(labels):
            plane = _plane_by_id(scene, int(instance_id))
            expected = cam.R @ plane.normal
            rows = normal[labels == instance_id]
            assert np.allclose(rows, expected, atol=1e-12)
        xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height), indexing="xy")
        rays = geometry.pixel_ray(cam.K, np.stack([xs, ys], axis=-1))
        assert np.all(np.einsum("hwc,hwc->hw", normal, rays) < 0.0)


def test_lifted_ground_truth_lies_on_surfaces(three_planes):
    scene = three_planes
    cam = scene.cameras[0]
    xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height), indexing="xy")
    pix = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(np.float64)
    rays = geometry.pixel_ray(cam.K, pix)
    pts = cam.C + scene.gt_depth[0].reshape(-1, 1) * (rays @ cam.R)
    assert surface_distance(scene, pts).max() < 1e-9


def test_occlusion_step_has_two_depth_layers():
    scene = generate("occlusion-step", seed=4)
    for v in range(scene.view_count):
        cam = scene.cameras[v]
        labels = scene.gt_labels[v].labels
        assert set(np.unique(labels)) == {1, 2}
        xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height), indexing="xy")
        pix = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(np.float64)
        rays = geometry.pixel_ray(cam.K, pix)
        pts = cam.C + scene.gt_depth[v].reshape(-1, 1) * (rays @ cam.R)
        z = pts[:, 2].reshape(labels.shape)
        assert np.allclose(z[labels == 1], 0.32, atol=1e-12)
        assert np.allclose(z[labels == 2], 0.24, atol=1e-12)


def test_visibility_masks_cover_the_interior(three_planes):
    scene = three_planes
    for v in range(scene.view_count):
        mask = scene.gt_visible[v]
        assert mask.dtype == bool and mask.shape == scene.gt_depth[v].shape
        # the verged rig keeps nearly the whole frame in at least one other view
        assert mask.mean() > 0.9
        assert np.all(mask[20:-20, 20:-20])


def test_occluded_pixels_are_marked_invisible():
    scene = generate("occlusion-step", seed=4)
    visible = np.stack(scene.gt_visible).mean()
    assert visible > 0.8
    # verify a handful of mask entries against a brute-force z-buffer check
    rng = np.random.default_rng(5)
    v = 0
    cam = scene.cameras[v]
    for _ in range(50):
        x = int(rng.integers(0, cam.width))
        y = int(rng.integers(0, cam.height))
        X = geometry.unproject(cam, (float(x), float(y)), float(scene.gt_depth[v][y, x]))
        seen = False
        for s, other in enumerate(scene.cameras):
            if s == v:
                continue
            try:
                pix, depth = geometry.project(other, X[None, :])
            except Exception:
                continue
            qx, qy = pix[0]
            if not (0 <= qx <= other.width - 1 and 0 <= qy <= other.height - 1) or depth[0] <= 0:
                continue
            ix, iy = int(round(qx)), int(round(qy))
            if depth[0] <= scene.gt_depth[s][iy, ix] * 1.01:
                seen = True
                break
        assert seen == bool(scene.gt_visible[v][y, x]), (x, y)


# ---------------------------------------------------------------------------
# texture model


def test_noise_field_is_band_limited_and_scaled():
    rng = np.random.default_rng(11)
    field = NoiseField.make(rng, amplitude=0.08, wavelength_range=(0.008, 0.018))
    mags = np.linalg.norm(field.wavevectors, axis=1)
    lam = 2.0 * math.pi / mags
    assert lam.min() >= 0.008 - 1e-12 and lam.max() <= 0.018 + 1e-12
    pts = np.random.default_rng(12).uniform(-0.1, 0.1, size=(20000, 3))
    vals = field(pts)
    assert abs(vals.mean()) < 0.01
    assert np.isclose(vals.std(), 0.08, rtol=0.2)


def test_textured_planes_have_contrast(three_planes):
    img = three_planes.images[0].samples
    labels = three_planes.gt_labels[0].labels
    for instance_id in (1, 2, 3):
        region = img[labels == instance_id]
        assert region.std() > 0.01


# ---------------------------------------------------------------------------
# scoring


def test_score_perfect_estimate_is_100():
    gt = np.full((10, 8), 2.0)
    rows = score(gt.copy(), gt)
    for row in rows:
        assert row.accuracy == 100.0
        assert row.completeness == 100.0
        assert row.f1 == 100.0
    assert [row.threshold_pct for row in rows] == [0.5, 1.0, 2.0]


def test_score_counts_by_threshold():
    gt = np.ones((2, 2))
    est = np.array([[1.0, 1.004], [1.015, -1.0]])
    rows = {row.threshold_pct: row for row in score(est, gt)}
    # 3 valid estimates, 4 valid ground-truth pixels
    assert np.isclose(rows[0.5].accuracy, 100.0 * 2 / 3)
    assert np.isclose(rows[0.5].completeness, 50.0)
    assert np.isclose(rows[1.0].accuracy, 100.0 * 2 / 3)
    assert np.isclose(rows[2.0].accuracy, 100.0)
    assert np.isclose(rows[2.0].completeness, 75.0)
    acc, comp = rows[0.5].accuracy, rows[0.5].completeness
    assert np.isclose(rows[0.5].f1, 2.0 * acc * comp / (acc + comp))


def test_score_handles_empty_and_mismatch():
    gt = np.ones((3, 3))
    rows = score(np.zeros((3, 3)), gt)  # all estimates invalid
    assert all(row.accuracy == 0.0 and row.completeness == 0.0 and row.f1 == 0.0 for row in rows)
    with pytest.raises(DimensionMismatchError):
        score(np.ones((2, 2)), gt)


def test_surface_distance_measures_offsets(three_planes):
    scene = three_planes
    on_plane = np.array([[0.0, 0.01, 0.26]])
    assert surface_distance(scene, on_plane)[0] < 1e-12
    shifted = np.array([[0.0, 0.0, 0.26 - 0.004]])
    assert np.isclose(surface_distance(scene, shifted)[0], 0.004, atol=1e-12)
    far = np.array([[0.0, 0.0, 0.10]])
    assert np.isclose(surface_distance(scene, far)[0], 0.16, atol=1e-12)


# ---------------------------------------------------------------------------
# materialization


def test_write_scene_round_trip(tmp_path):
    scene = generate("slanted-box", seed=6)
    manifest_path = write_scene(scene, tmp_path)
    assert manifest_path == os.path.join(tmp_path, "scene.txt")
    for sub in ("images", "labels", "gt", "results"):
        assert os.path.isdir(tmp_path / sub)

    loaded = load_scene(manifest_path)
    assert loaded.view_count == scene.view_count
    assert loaded.manifest.depth_range == scene.depth_range
    for v in range(scene.view_count):
        cam, orig = loaded.cameras[v], scene.cameras[v]
        assert np.array_equal(cam.K, orig.K)
        assert np.array_equal(cam.R, orig.R)
        assert np.array_equal(cam.C, orig.C)
        quantized = (scene.images[v].samples * 255.0 + 0.5).astype(np.uint8)
        decoded = (loaded.images[v].samples * 255.0 + 0.5).astype(np.uint8)
        assert np.array_equal(decoded, quantized)
        labels = load_label_map(
            os.path.join(tmp_path, loaded.manifest.label_paths[v]), cam.width, cam.height
        )
        assert np.array_equal(labels.labels, scene.gt_labels[v].labels)
        depth, normal, cost = read_depth_map(tmp_path / "gt" / f"depth_{v:04d}.bin")
        assert np.array_equal(depth, scene.gt_depth[v].astype(np.float32))
        assert np.array_equal(normal, scene.gt_normal[v].astype(np.float32))
        assert not cost.any()

    cfg = load_config(tmp_path / "config.txt")
    assert cfg.seed == scene.seed
    assert cfg.k == 2
    assert cfg.consistency_min == 4
    assert cfg.rel_depth_tol == 0.005
    assert cfg.normal_angle_tol == 8.0


def test_ground_truth_scores_perfectly_against_itself(three_planes):
    rows = score(three_planes.gt_depth[0], three_planes.gt_depth[0])
    assert all(row.f1 == 100.0 for row in rows)
