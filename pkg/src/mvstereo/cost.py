"""Matching cost terms and their aggregation.

Scalar reference implementations; the sweep engine re-implements the same
math in batched form and is cross-checked against these in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .errors import BehindCameraError, DegenerateGeometryError, OutOfBoundsError
from .imaging import ImageGrid, laplacian, sample_bilinear
from .segmentation import DeformedPatch

#: Cost assigned when correlation is undefined or the warp leaves the source.
SENTINEL_COST = 2.0

#: Weighted variances below this are treated as textureless (no correlation).
VARIANCE_FLOOR = 1e-10


@dataclass(frozen=True)
class CostComponents:
    """The three aggregated-cost ingredients for one hypothesis."""

    c_ms: float  # multi-scale matching cost, [0, 2]
    c_rp: float  # reprojection error, pixels (level-0 scale), truncated
    c_pc: float  # projection color gradient error, >= 0

    def as_array(self) -> np.ndarray:
        return np.array([self.c_ms, self.c_rp, self.c_pc], dtype=np.float64)


@dataclass(frozen=True)
class Hyperparameters:
    """Tunable weights and structural constants of the cost model."""

    w_ms: float = 1.0
    w_rp: float = 0.2
    w_pc: float = 0.2
    tau: float = 2.0
    l_side: int = 11
    k: int = 3
    n_max: int = 3
    eta: float = 0.1

    def weights(self) -> np.ndarray:
        return np.array([self.w_ms, self.w_rp, self.w_pc], dtype=np.float64)

    def with_weights(self, w) -> "Hyperparameters":
        w = np.asarray(w, dtype=np.float64)
        return replace(self, w_ms=float(w[0]), w_rp=float(w[1]), w_pc=float(w[2]))


def bilateral_weights(
    ref_gray: np.ndarray,
    center_gray: float,
    offsets: np.ndarray,
    sigma_c: float,
    sigma_s: float,
) -> np.ndarray:
    """exp(-|dI|/sigma_c - ||dx||/sigma_s) per sample, anchored at the center."""
    dc = np.abs(np.asarray(ref_gray, dtype=np.float64) - float(center_gray))
    ds = np.linalg.norm(np.asarray(offsets, dtype=np.float64), axis=-1)
    return np.exp(-dc / sigma_c - ds / sigma_s)


def weighted_correlation(
    ref: np.ndarray, src: np.ndarray, w: np.ndarray
) -> float | None:
    """Bilateral-weighted correlation coefficient, or None when degenerate."""
    w = np.asarray(w, dtype=np.float64)
    sw = w.sum()
    if sw <= 0.0:
        return None
    ref = np.asarray(ref, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    mr = (w * ref).sum() / sw
    ms = (w * src).sum() / sw
    var_r = (w * (ref - mr) ** 2).sum() / sw
    var_s = (w * (src - ms) ** 2).sum() / sw
    if var_r < VARIANCE_FLOOR or var_s < VARIANCE_FLOOR:
        return None
    cov = (w * (ref - mr) * (src - ms)).sum() / sw
    return float(np.clip(cov / math.sqrt(var_r * var_s), -1.0, 1.0))


def ncc_deformed(
    ref_img: ImageGrid,
    src_img: ImageGrid,
    ref_cam: geometry.CameraModel,
    src_cam: geometry.CameraModel,
    pixel: tuple[int, int],
    h: geometry.PlaneHypothesis,
    patch: DeformedPatch,
    sigma_c: float = 0.1,
    sigma_s: float | None = None,
    min_samples: int = 9,
) -> float:
    """Bilateral-weighted NCC cost of one plane hypothesis, 1 - rho in [0, 2].

    Patch samples are read in the reference around ``pixel`` (plus the
    patch's center offset), warped through the plane into the source, and
    bilinearly sampled there. Returns the sentinel maximum when more than
    half the samples leave the source, fewer than ``min_samples`` remain,
    or either side has no usable variance.
    """
    if sigma_s is None:
        sigma_s = (patch.l_h + patch.l_v) / 2.0
    px, py = int(pixel[0]), int(pixel[1])
    offs = patch.samples
    xs = offs[:, 0] + px
    ys = offs[:, 1] + py
    keep = (xs >= 0) & (xs < ref_img.width) & (ys >= 0) & (ys < ref_img.height)
    if not np.any(keep):
        return SENTINEL_COST
    xs, ys, offs = xs[keep], ys[keep], offs[keep]
    total = xs.size

    ref_gray = ref_img.gray()
    ref_vals = ref_gray[ys, xs].astype(np.float64)
    ax = int(np.clip(px + patch.offset[0], 0, ref_img.width - 1))
    ay = int(np.clip(py + patch.offset[1], 0, ref_img.height - 1))
    anchor_gray = float(ref_gray[ay, ax])
    rel = offs.astype(np.float64) - np.array(
        [patch.offset[0], patch.offset[1]], dtype=np.float64
    )
    weights = bilateral_weights(ref_vals, anchor_gray, rel, sigma_c, sigma_s)

    try:
        hom = geometry.plane_homography(ref_cam, src_cam, (px, py), h)
    except DegenerateGeometryError:
        return SENTINEL_COST
    u = np.stack([xs, ys, np.ones_like(xs)], axis=-1).astype(np.float64)
    q = u @ hom.T
    good = q[:, 2] > 1e-15
    qx = np.where(good, q[:, 0] / np.where(good, q[:, 2], 1.0), -1.0)
    qy = np.where(good, q[:, 1] / np.where(good, q[:, 2], 1.0), -1.0)
    inside = (
        good
        & (qx >= 0.0)
        & (qx <= src_img.width - 1.0)
        & (qy >= 0.0)
        & (qy <= src_img.height - 1.0)
    )
    valid = int(inside.sum())
    if valid < min_samples or (total - valid) * 2 > total:
        return SENTINEL_COST

    src_gray = ImageGrid.from_array(src_img.gray())
    src_vals = sample_bilinear(src_gray, qx[inside], qy[inside])[:, 0]
    rho = weighted_correlation(ref_vals[inside], src_vals, weights[inside])
    if rho is None:
        return SENTINEL_COST
    return float(np.clip(1.0 - rho, 0.0, 2.0))


def multi_scale_cost(level_costs) -> float:
    """Mean of the valid per-level matching costs; all invalid -> sentinel."""
    costs = np.asarray(level_costs, dtype=np.float64)
    valid = costs < SENTINEL_COST
    if not np.any(valid):
        return SENTINEL_COST
    return float(costs[valid].mean())


def projection_color_error(
    ref_img: ImageGrid,
    src_img: ImageGrid,
    p_ref: tuple[float, float],
    p_src: tuple[float, float],
    tau: float,
    mode: str = "literal",
) -> float:
    """Difference of per-channel Laplacians between corresponding pixels.

    ``literal`` floors the Euclidean difference norm at tau (the written
    form of the gradient term); ``capped`` truncates it at tau instead.
    An out-of-bounds source point returns the sentinel for the mode (tau).
    """
    if mode not in ("literal", "capped"):
        raise ValueError(f"unknown projection-gradient mode {mode!r}")
    lap_ref = laplacian(ref_img)
    lap_src = laplacian(src_img)
    try:
        g_ref = sample_bilinear(lap_ref, p_ref[0], p_ref[1])
        g_src = sample_bilinear(lap_src, p_src[0], p_src[1])
    except OutOfBoundsError:
        return float(tau)
    diff = float(np.linalg.norm(g_src - g_ref))
    if mode == "literal":
        return max(diff, float(tau))
    return min(diff, float(tau))


def reprojection_error(
    ref_cam: geometry.CameraModel,
    src_cam: geometry.CameraModel,
    pixel: tuple[float, float],
    h: geometry.PlaneHypothesis,
    src_depth_map: np.ndarray | None,
    tau_rp: float = 2.0,
    level_scale: float = 1.0,
) -> float:
    """Round-trip pixel error against the source's current depth estimate.

    Projects ``pixel`` into the source through the plane, bilinearly reads
    the source depth at the fractional landing point, lifts that depth to 3D
    and projects it back into the reference; the truncated distance
    ``min(||p - p_back|| * level_scale, tau_rp)`` is returned. Any failure
    (landing out of bounds, missing or non-positive source depth, back
    projection behind the camera) yields tau_rp.
    """
    if src_depth_map is None:
        return float(tau_rp)
    try:
        q = geometry.plane_induced_correspondence(ref_cam, src_cam, pixel, h)
    except (OutOfBoundsError, DegenerateGeometryError):
        return float(tau_rp)
    hmap, wmap = src_depth_map.shape
    x0, y0 = int(math.floor(q[0])), int(math.floor(q[1]))
    x0 = min(max(x0, 0), wmap - 2) if wmap > 1 else 0
    y0 = min(max(y0, 0), hmap - 2) if hmap > 1 else 0
    taps = src_depth_map[y0 : y0 + 2, x0 : x0 + 2]
    if taps.size == 0 or not np.all(np.isfinite(taps)) or np.any(taps <= 0.0):
        return float(tau_rp)
    fx, fy = q[0] - x0, q[1] - y0
    d_src = float(
        taps[0, 0] * (1 - fx) * (1 - fy)
        + taps[0, min(1, wmap - 1)] * fx * (1 - fy)
        + taps[min(1, hmap - 1), 0] * (1 - fx) * fy
        + taps[min(1, hmap - 1), min(1, wmap - 1)] * fx * fy
    )
    if d_src <= 0.0:
        return float(tau_rp)
    point = geometry.unproject(src_cam, q, d_src)
    try:
        p_back, depth_back = geometry.project(ref_cam, point)
    except BehindCameraError:
        return float(tau_rp)
    if depth_back <= 0.0:
        return float(tau_rp)
    err = math.hypot(p_back[0] - pixel[0], p_back[1] - pixel[1]) * level_scale
    return float(min(err, tau_rp))


def aggregate(cc: CostComponents, hp: Hyperparameters) -> float:
    """Weighted sum of the three components."""
    return hp.w_ms * cc.c_ms + hp.w_rp * cc.c_rp + hp.w_pc * cc.c_pc
