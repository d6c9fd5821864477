"""Shared helpers for the mvstereo test suite."""

from __future__ import annotations

import numpy as np
import pytest

from mvstereo import geometry, imaging, pipeline
from mvstereo.ioformats import LoadedScene, RunConfig, SceneManifest
from mvstereo.segmentation import InstanceLabelMap


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return geometry.rotation_from_quaternion(*q)


def random_camera(
    rng: np.random.Generator,
    width: int = 64,
    height: int = 48,
    max_tilt: float = 1.0,
) -> geometry.CameraModel:
    """Random valid camera looking roughly down +z.

    Args:
        max_tilt: scales the random rotation away from identity; 0 gives
            axis-aligned cameras, 1 gives fully random orientations.
    """
    if max_tilt == 0.0:
        R = np.eye(3)
    else:
        q = np.array([1.0 / max(max_tilt, 1e-6), *rng.normal(scale=0.3, size=3)])
        q /= np.linalg.norm(q)
        R = geometry.rotation_from_quaternion(*q)
    f = rng.uniform(100.0, 400.0)
    K = np.array(
        [
            [f, 0.0, width / 2 + rng.uniform(-3, 3)],
            [0.0, f * rng.uniform(0.9, 1.1), height / 2 + rng.uniform(-3, 3)],
            [0.0, 0.0, 1.0],
        ]
    )
    C = rng.uniform(-0.1, 0.1, size=3)
    return geometry.CameraModel(K, R, C, width, height)


def camera_facing_normal(
    rng: np.random.Generator, ray: np.ndarray, spread: float = 0.6
) -> np.ndarray:
    """Unit normal with dot(n, ray) < 0 (front side toward the camera)."""
    n = -ray / np.linalg.norm(ray) + rng.uniform(-spread, spread, size=3)
    n /= np.linalg.norm(n)
    if float(n @ ray) >= 0.0:
        n = -ray / np.linalg.norm(ray)
    return n


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def make_mini_scene(
    n_views: int = 3,
    width: int = 48,
    height: int = 40,
    plane_depth: float = 2.0,
    split: bool = False,
    baseline: float = 0.06,
):
    """Tiny analytic scene: a fronto-parallel textured plane at a fixed depth.

    The texture is a sum of world-space sinusoids evaluated exactly for each
    camera, so all views are perfectly consistent renderings of one surface
    and the true depth is ``plane_depth`` at every pixel.  Returns the loaded
    scene plus one full-resolution label map per view (a single instance, or
    two vertical halves when ``split`` is set).
    """
    f = 70.0
    K = np.array(
        [[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]]
    )
    cams = []
    for v in range(n_views):
        C = np.array(
            [baseline * (v - (n_views - 1) / 2.0), 0.015 * ((v % 2) - 0.5), 0.0]
        )
        cams.append(geometry.CameraModel(K, np.eye(3), C, width, height))
    waves = (
        (0.16, 9.0, 4.0, 0.3),
        (0.12, 3.5, 11.0, 1.9),
        (0.09, 17.0, 7.5, 4.1),
        (0.07, 6.0, 21.0, 2.6),
    )
    xs, ys = np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )
    pix = np.stack([xs, ys], axis=-1)
    images = []
    for cam in cams:
        pts = cam.C + plane_depth * geometry.pixel_ray(cam.K, pix)
        val = np.full((height, width), 0.5)
        for a, fx, fy, ph in waves:
            val += a * np.sin(fx * pts[..., 0] + fy * pts[..., 1] + ph)
        images.append(imaging.ImageGrid.from_array(np.clip(val, 0.0, 1.0).astype(np.float32)))
    lab = np.ones((height, width), dtype=np.int32)
    if split:
        lab[:, width // 2 :] = 2
    labels = [InstanceLabelMap(width=width, height=height, labels=lab) for _ in cams]
    manifest = SceneManifest(
        image_paths=tuple(f"<memory:{i}>" for i in range(n_views)),
        cameras=tuple(cams),
        label_paths=(None,) * n_views,
        depth_range=(1.2, 3.2),
        output_dir=".",
    )
    return LoadedScene(manifest=manifest, images=tuple(images)), labels


def make_mini_state(cfg: RunConfig | None = None, **scene_kwargs):
    """Initialized pipeline state over :func:`make_mini_scene`."""
    if cfg is None:
        cfg = RunConfig(seed=5, k=2, l_side=9, ablation="no-em")
    scene, labels = make_mini_scene(**scene_kwargs)
    state = pipeline.build_state(scene, cfg, labels_override=labels)
    pipeline.initialize(state)
    return state
