"""Synthetic multi-view scenes with exact analytic ground truth.

Scenes are unions of planar regions ray-cast from a small translating camera
rig. Texture is band-limited value noise evaluated in world coordinates, so
every view observes the same Lambertian surface; ground-truth depth, normals,
labels, and visibility fall out of the caster analytically.

Scale note: the rig is desk-scale (depths around 0.25 units, baseline 0.035)
so that absolute point-to-surface tolerances in the low 1e-3 range correspond
to sub-percent relative depth accuracy.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, UnknownPresetError
from .geometry import CameraModel
from .imaging import ImageGrid
from .segmentation import InstanceLabelMap

PRESETS = ("three-planes", "textureless-wall", "slanted-box", "occlusion-step")

_WIDTH, _HEIGHT = 160, 120
_FOCAL = 240.0
_SPACING_X = 0.050
_SPACING_Y = 0.0375
_TARGET = np.array([0.0, 0.0, 0.28])
_VIEWS = 4
_DEPTH_RANGE = (0.18, 0.40)

_INF = float("inf")


@dataclass(frozen=True)
class NoiseField:
    """Sum of random cosines with wavelengths in a fixed band (world units)."""

    wavevectors: np.ndarray  # (j, 3)
    phases: np.ndarray  # (j,)
    amplitudes: np.ndarray  # (j,)

    @classmethod
    def make(
        cls,
        rng: np.random.Generator,
        amplitude: float,
        wavelength_range: tuple[float, float] = (0.008, 0.018),
        components: int = 12,
    ) -> "NoiseField":
        dirs = rng.normal(size=(components, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lam = np.exp(
            rng.uniform(
                math.log(wavelength_range[0]),
                math.log(wavelength_range[1]),
                size=components,
            )
        )
        k = dirs * (2.0 * math.pi / lam)[:, None]
        phases = rng.uniform(0.0, 2.0 * math.pi, size=components)
        amps = np.full(components, amplitude * math.sqrt(2.0 / components))
        return cls(wavevectors=k, phases=phases, amplitudes=amps)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        phase = points @ self.wavevectors.T + self.phases
        return np.cos(phase) @ self.amplitudes


@dataclass(frozen=True)
class PlaneRegion:
    """One bounded planar surface patch.

    ``bounds`` is (xmin, xmax, ymin, ymax) in world coordinates applied to
    the intersection point (use infinities for unbounded extents). ``shade``
    selects the albedo model: "noise" adds the indexed noise field,
    "gradient" adds a smooth offset-center quadratic illumination ramp,
    "flat" leaves the base color untouched.
    """

    instance_id: int
    point: np.ndarray  # (3,)
    normal: np.ndarray  # (3,) unit, camera-facing (negative z component)
    base_color: np.ndarray  # (3,) in [0, 1]
    bounds: tuple[float, float, float, float]
    shade: str = "noise"
    noise_index: int = 0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.bounds
        return (
            (pts[..., 0] >= xmin)
            & (pts[..., 0] <= xmax)
            & (pts[..., 1] >= ymin)
            & (pts[..., 1] <= ymax)
        )


@dataclass(frozen=True)
class SynthScene:
    preset: str
    seed: int
    cameras: tuple[CameraModel, ...]
    images: tuple[ImageGrid, ...]
    gt_depth: tuple[np.ndarray, ...]
    gt_normal: tuple[np.ndarray, ...]  # camera-frame normals per view
    gt_labels: tuple[InstanceLabelMap, ...]
    gt_visible: tuple[np.ndarray, ...]  # bool masks; ray casting covers all
    planes: tuple[PlaneRegion, ...]
    depth_range: tuple[float, float]

    @property
    def view_count(self) -> int:
        return len(self.cameras)


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation; +z toward `target`, image y following world y."""
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def _rig(n_views: int = _VIEWS) -> tuple[CameraModel, ...]:
    """A 2x2 verged rig: all cameras aim at a common working-depth target.

    The square layout gives both horizontal and vertical parallax, and the
    verge keeps every view's frustum on the same scene volume, so interior
    pixels stay visible in all four views instead of losing the border
    strips a laterally translating rig gives up.
    """
    k = np.array(
        [
            [_FOCAL, 0.0, (_WIDTH - 1) / 2.0],
            [0.0, _FOCAL, (_HEIGHT - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    corners = ((0, 0), (1, 0), (0, 1), (1, 1))
    cams = []
    for i in range(n_views):
        gx, gy = corners[i % 4]
        center = np.array(
            [
                (gx - 0.5) * _SPACING_X + (i // 4) * _SPACING_X,
                (gy - 0.5) * _SPACING_Y,
                0.0,
            ]
        )
        cams.append(
            CameraModel(
                K=k,
                R=_look_at(center, _TARGET),
                C=center,
                width=_WIDTH,
                height=_HEIGHT,
            )
        )
    return tuple(cams)


def _gradient_shade(pts: np.ndarray) -> np.ndarray:
    """Smooth illumination over a constant-color surface.

    A quadratic ramp (light source outside the view) plus a few soft
    long-wavelength lobes. Locally the field is nearly linear, which a
    normalized correlation window cannot anchor to; only windows spanning
    several dozen pixels see enough curvature to discriminate depth.
    """
    x = pts[..., 0]
    y = pts[..., 1]
    dx = x + 0.28
    dy = y - 0.12
    quad = 0.18 * (dx * dx + 0.6 * dy * dy) / 0.16
    two_pi = 2.0 * math.pi
    lobes = (
        0.055 * np.cos(two_pi * x / 0.085 + 0.7)
        + 0.045 * np.cos(two_pi * (x / 0.13 + y / 0.11) + 2.1)
        + 0.040 * np.cos(two_pi * y / 0.095 - 1.3)
    )
    return quad + lobes


def _preset_planes(preset: str, rng: np.random.Generator):
    tilt = math.radians(12.0)
    if preset == "three-planes":
        n_side_l = np.array([-math.sin(tilt), 0.0, -math.cos(tilt)])
        n_side_r = np.array([math.sin(tilt), 0.0, -math.cos(tilt)])
        planes = (
            PlaneRegion(
                1, np.array([0.0, 0.0, 0.26]), np.array([0.0, 0.0, -1.0]),
                np.array([0.65, 0.35, 0.35]), (-0.05, 0.05, -_INF, _INF),
            ),
            PlaneRegion(
                2, np.array([-0.05, 0.0, 0.26]), n_side_l,
                np.array([0.35, 0.62, 0.38]), (-_INF, -0.05, -_INF, _INF),
            ),
            PlaneRegion(
                3, np.array([0.05, 0.0, 0.26]), n_side_r,
                np.array([0.38, 0.40, 0.68]), (0.05, _INF, -_INF, _INF),
            ),
        )
        noises = (NoiseField.make(rng, 0.07),)
        return planes, noises
    if preset == "textureless-wall":
        # A big smoothly lit wall, plus a grid of small textured tiles
        # floating in front of it. The tiles anchor the scene and their
        # borders are where fixed matching windows mix the two depths.
        planes = [
            PlaneRegion(
                1, np.array([0.0, 0.0, 0.30]), np.array([0.0, 0.0, -1.0]),
                np.array([0.55, 0.55, 0.55]), (-_INF, _INF, -_INF, _INF),
                shade="gradient",
            )
        ]
        tile_colors = (
            np.array([0.62, 0.30, 0.30]),
            np.array([0.30, 0.32, 0.60]),
            np.array([0.32, 0.58, 0.34]),
        )
        idx = 0
        for cy in (-0.021, 0.0, 0.021):
            for cx in (-0.033, -0.011, 0.011, 0.033):
                hw, hh = (0.0068, 0.0056) if idx % 2 == 0 else (0.0056, 0.0046)
                planes.append(
                    PlaneRegion(
                        2 + idx,
                        np.array([0.0, 0.0, 0.22]),
                        np.array([0.0, 0.0, -1.0]),
                        tile_colors[idx % 3],
                        (cx - hw, cx + hw, cy - hh, cy + hh),
                        noise_index=idx % 2,
                    )
                )
                idx += 1
        noises = (NoiseField.make(rng, 0.09), NoiseField.make(rng, 0.09))
        return tuple(planes), noises
    if preset == "slanted-box":
        slant = math.radians(25.0)
        planes = (
            PlaneRegion(
                1, np.array([0.0, 0.0, 0.34]), np.array([0.0, 0.0, -1.0]),
                np.array([0.45, 0.50, 0.55]), (-_INF, _INF, -_INF, _INF),
                noise_index=0,
            ),
            PlaneRegion(
                2, np.array([0.05, 0.0, 0.24]),
                np.array([math.sin(slant), 0.0, -math.cos(slant)]),
                np.array([0.60, 0.55, 0.30]), (0.020, 0.085, -0.035, 0.035),
                noise_index=1,
            ),
        )
        noises = (NoiseField.make(rng, 0.07), NoiseField.make(rng, 0.09))
        return planes, noises
    if preset == "occlusion-step":
        planes = (
            PlaneRegion(
                1, np.array([0.0, 0.0, 0.32]), np.array([0.0, 0.0, -1.0]),
                np.array([0.50, 0.50, 0.50]), (-_INF, _INF, -_INF, _INF),
                noise_index=0,
            ),
            PlaneRegion(
                2, np.array([0.045, 0.0, 0.24]), np.array([0.0, 0.0, -1.0]),
                np.array([0.52, 0.52, 0.52]), (0.045, _INF, -_INF, _INF),
                noise_index=1,
            ),
        )
        noises = (NoiseField.make(rng, 0.07), NoiseField.make(rng, 0.07))
        return planes, noises
    raise UnknownPresetError(f"unknown preset {preset!r}; expected one of {PRESETS}")


def _render_view(cam: CameraModel, planes, noises):
    xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height), indexing="xy")
    k_inv = np.linalg.inv(cam.K)
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1).astype(np.float64)
    # Camera-frame z of these rays is exactly 1, so the line parameter t
    # below is the camera depth even for a rotated camera.
    dirs = (pix @ k_inv.T) @ cam.R

    depth = np.full((cam.height, cam.width), np.inf)
    labels = np.zeros((cam.height, cam.width), dtype=np.int32)
    normal = np.zeros((cam.height, cam.width, 3))
    color = np.zeros((cam.height, cam.width, 3))
    for plane in planes:
        denom = dirs @ plane.normal
        offset = float(plane.normal @ (plane.point - cam.C))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = offset / denom
        pts = cam.C + t[..., None] * dirs
        hit = (denom < 0.0) & (t > 0.0) & plane.contains(pts) & (t < depth)
        if not np.any(hit):
            continue
        depth[hit] = t[hit]
        labels[hit] = plane.instance_id
        normal[hit] = plane.normal
        shade = np.tile(plane.base_color, (int(hit.sum()), 1))
        if plane.shade == "noise":
            shade = shade + noises[plane.noise_index](pts[hit])[:, None]
        elif plane.shade == "gradient":
            shade = shade + _gradient_shade(pts[hit])[:, None]
        color[hit] = shade

    if not np.all(np.isfinite(depth)):
        raise AssertionError("preset leaves uncovered pixels; planes must tile the frustum")
    img = ImageGrid.from_array(np.clip(color, 0.0, 1.0).astype(np.float32))
    label_map = InstanceLabelMap(width=cam.width, height=cam.height, labels=labels)
    return depth, normal, label_map, img


def _visibility_masks(cams, depths) -> list[np.ndarray]:
    """Per-view masks of pixels whose surface point some other view also sees.

    A pixel counts as visible when its ground-truth 3D point projects inside
    at least one other view and is not occluded there (z-buffer test against
    that view's own depth map, 1% tolerance). Pixels seen by the reference
    alone cannot be photometrically matched, so end-to-end accuracy is
    measured over these masks.
    """
    masks = []
    for v, cam in enumerate(cams):
        xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height), indexing="xy")
        dirs = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ np.linalg.inv(cam.K).T
        pts = cam.C + depths[v][..., None] * (dirs @ cam.R)
        seen = np.zeros(depths[v].shape, dtype=bool)
        for s, other in enumerate(cams):
            if s == v:
                continue
            x_cam = (pts - other.C) @ other.R.T
            z = x_cam[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                qx = other.K[0, 0] * x_cam[..., 0] / z + other.K[0, 2]
                qy = other.K[1, 1] * x_cam[..., 1] / z + other.K[1, 2]
            inside = (
                (z > 0.0)
                & (qx >= 0.0)
                & (qx <= other.width - 1.0)
                & (qy >= 0.0)
                & (qy <= other.height - 1.0)
            )
            ix = np.clip(np.round(qx), 0, other.width - 1).astype(np.int64)
            iy = np.clip(np.round(qy), 0, other.height - 1).astype(np.int64)
            unoccluded = z <= depths[s][iy, ix] * 1.01
            seen |= inside & unoccluded
        masks.append(seen)
    return masks


def generate(preset: str, seed: int) -> SynthScene:
    """Render one preset deterministically under the seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    planes, noises = _preset_planes(preset, rng)
    cams = _rig()
    depths, normals, labelmaps, images = [], [], [], []
    for cam in cams:
        depth, normal, label_map, img = _render_view(cam, planes, noises)
        # Normals are stored in the camera frame: n_cam = R @ n_world.
        normals.append(normal @ cam.R.T)
        depths.append(depth)
        labelmaps.append(label_map)
        images.append(img)
    return SynthScene(
        preset=preset,
        seed=seed,
        cameras=cams,
        images=tuple(images),
        gt_depth=tuple(depths),
        gt_normal=tuple(normals),
        gt_labels=tuple(labelmaps),
        gt_visible=tuple(_visibility_masks(cams, depths)),
        planes=planes,
        depth_range=_DEPTH_RANGE,
    )


def surface_distance(scene: SynthScene, points: np.ndarray) -> np.ndarray:
    """Distance from each 3D point to the nearest scene surface patch.

    Uses the perpendicular plane distance where the foot point falls inside
    the patch bounds; points whose foot misses every bounded region get the
    distance to the nearest in-bounds clamped foot point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(pts.shape[0], np.inf)
    for plane in scene.planes:
        d = (pts - plane.point) @ plane.normal
        foot = pts - d[:, None] * plane.normal[None, :]
        xmin, xmax, ymin, ymax = plane.bounds
        clamped = foot.copy()
        clamped[:, 0] = np.clip(clamped[:, 0], xmin, xmax)
        clamped[:, 1] = np.clip(clamped[:, 1], ymin, ymax)
        # Re-solve the clamped point onto the plane along z (planes here are
        # graphs over (x, y); normal z component is always nonzero).
        nz = plane.normal[2]
        clamped[:, 2] = (
            plane.point[2]
            - (
                (clamped[:, 0] - plane.point[0]) * plane.normal[0]
                + (clamped[:, 1] - plane.point[1]) * plane.normal[1]
            )
            / nz
        )
        dist = np.linalg.norm(pts - clamped, axis=1)
        best = np.minimum(best, dist)
    return best


@dataclass(frozen=True)
class ScoreRow:
    threshold_pct: float
    accuracy: float  # percent
    completeness: float  # percent
    f1: float  # percent


def score(
    est_depth: np.ndarray,
    gt_depth: np.ndarray,
    thresholds_pct=(0.5, 1.0, 2.0),
) -> list[ScoreRow]:
    """Accuracy / completeness / F1 of one depth map at relative thresholds.

    Accuracy counts estimated pixels that are within the threshold of the
    ground truth; completeness counts ground-truth pixels that received such
    an estimate. Invalid estimates are non-finite or non-positive entries.
    """
    est = np.asarray(est_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if est.shape != gt.shape:
        raise DimensionMismatchError(f"est {est.shape} vs gt {gt.shape}")
    est_valid = np.isfinite(est) & (est > 0.0)
    gt_valid = np.isfinite(gt) & (gt > 0.0)
    rel = np.full(est.shape, np.inf)
    both = est_valid & gt_valid
    rel[both] = np.abs(est[both] - gt[both]) / gt[both]

    rows = []
    n_est = int(est_valid.sum())
    n_gt = int(gt_valid.sum())
    for thr in thresholds_pct:
        within = rel <= (thr / 100.0)
        acc = 100.0 * int((within & est_valid).sum()) / n_est if n_est else 0.0
        comp = 100.0 * int((within & gt_valid).sum()) / n_gt if n_gt else 0.0
        f1 = 2.0 * acc * comp / (acc + comp) if (acc + comp) > 0.0 else 0.0
        rows.append(ScoreRow(threshold_pct=float(thr), accuracy=acc, completeness=comp, f1=f1))
    return rows


def write_scene(scene: SynthScene, out_dir) -> str:
    """Materialize a scene as a manifest directory the CLI can consume.

    Layout: ``images/view_NNNN.png``, ``labels/label_NNNN.png`` (16-bit ids),
    ``gt/depth_NNNN.bin`` (depth + camera-frame normals, zero costs),
    ``scene.txt``, and a ``config.txt`` tuned for this resolution (two
    downsampled levels; three would push the coarsest level too small to
    carry full matching windows).

    Returns:
        Path of the written manifest.
    """
    from .ioformats import (
        RunConfig,
        SceneManifest,
        save_image,
        save_label_map_png,
        write_config,
        write_depth_map,
        write_manifest,
    )

    out_dir = os.fspath(out_dir)
    for sub in ("images", "labels", "gt", "results"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    image_paths, label_paths = [], []
    for i in range(scene.view_count):
        rel_img = f"images/view_{i:04d}.png"
        rel_lab = f"labels/label_{i:04d}.png"
        save_image(os.path.join(out_dir, rel_img), scene.images[i])
        save_label_map_png(os.path.join(out_dir, rel_lab), scene.gt_labels[i])
        write_depth_map(
            os.path.join(out_dir, "gt", f"depth_{i:04d}.bin"),
            scene.gt_depth[i],
            scene.gt_normal[i],
            np.zeros_like(scene.gt_depth[i], dtype=np.float32),
        )
        image_paths.append(rel_img)
        label_paths.append(rel_lab)

    manifest = SceneManifest(
        image_paths=tuple(image_paths),
        cameras=scene.cameras,
        label_paths=tuple(label_paths),
        depth_range=scene.depth_range,
        output_dir="results",
        match_file=None,
        base_dir=out_dir,
    )
    manifest_path = os.path.join(out_dir, "scene.txt")
    write_manifest(manifest_path, manifest)
    # k=2 because a 160x120 frame only supports two pyramid levels. The
    # fusion gates are strict (all views must agree, tight depth/normal
    # tolerances): the renders are noise-free, so near-miss estimates are
    # correlated across views and pairwise checks alone let them through.
    write_config(
        os.path.join(out_dir, "config.txt"),
        RunConfig(
            seed=scene.seed,
            k=2,
            consistency_min=4,
            rel_depth_tol=0.005,
            normal_angle_tol=8.0,
        ),
    )
    return manifest_path
