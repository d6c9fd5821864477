"""Pinhole cameras, plane hypotheses, and the projective maps built on them.

Conventions used throughout the package:

* world -> camera: ``x_cam = R @ (X - C)`` (COLMAP-style extrinsics),
* pixels: ``p ~ K @ x_cam`` dehomogenized; "depth" always means the
  camera-frame z component,
* plane hypotheses live in the *reference camera frame* and their normals
  face the camera (``dot(normal, pixel ray) < 0``).

All geometry runs in float64; image sample math is float32 and lives in
:mod:`mvstereo.imaging`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    InvalidCameraError,
    NonPositiveDepthError,
    OutOfBoundsError,
)

_ROT_TOL = 1e-9


def _checked_array(values, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidCameraError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidCameraError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics K, world->camera rotation R, center C.

    Args:
        K: 3x3 upper-triangular intrinsics in pixels (positive focals).
        R: 3x3 world->camera rotation, orthonormal with det +1.
        C: camera center in scene units.
        width: image width in pixels, >= 8.
        height: image height in pixels, >= 8.
    """

    K: np.ndarray
    R: np.ndarray
    C: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        K = _checked_array(self.K, (3, 3), "K")
        R = _checked_array(self.R, (3, 3), "R")
        C = _checked_array(self.C, (3,), "C")
        if self.width < 8 or self.height < 8:
            raise InvalidCameraError(
                f"image dimensions must be >= 8, got {self.width}x{self.height}"
            )
        if np.abs(R @ R.T - np.eye(3)).max() > _ROT_TOL:
            raise InvalidCameraError("R is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
            raise InvalidCameraError("det(R) must be +1 within 1e-9")
        lower = np.array([K[1, 0], K[2, 0], K[2, 1]])
        if np.abs(lower).max() > 0.0:
            raise InvalidCameraError("K must be upper-triangular")
        if K[0, 0] <= 0.0 or K[1, 1] <= 0.0:
            raise InvalidCameraError("K focal entries must be positive")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise InvalidCameraError("K[2,2] must be 1")
        for arr in (K, R, C):
            arr.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "C", C)

    def at_level(self, level: int, width: int, height: int) -> "CameraModel":
        """Camera for pyramid level `level` with halved intrinsics.

        Uses the exact pixel-center convention: a level-L pixel x covers
        level-0 coordinate (x + 0.5) * 2^L - 0.5, so cx' = (cx + 0.5)/s - 0.5
        with s = 2^L.
        """
        if level == 0:
            return self
        s = float(1 << level)
        K = np.array(self.K)
        K[0, 0] /= s
        K[1, 1] /= s
        K[0, 1] /= s
        K[0, 2] = (K[0, 2] + 0.5) / s - 0.5
        K[1, 2] = (K[1, 2] + 0.5) / s - 0.5
        return CameraModel(K, self.R, self.C, width, height)


@dataclass(frozen=True)
class PlaneHypothesis:
    """Per-pixel PatchMatch state: a depth and a unit normal (camera frame)."""

    depth: float
    normal: np.ndarray

    def __post_init__(self) -> None:
        n = np.array(self.normal, dtype=np.float64)
        if n.shape != (3,):
            raise DegenerateGeometryError(f"normal must be a 3-vector, got {n.shape}")
        norm = float(np.linalg.norm(n))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
            raise DegenerateGeometryError(f"normal must be unit length, |n|={norm}")
        if not (np.isfinite(self.depth) and self.depth > 0.0):
            raise NonPositiveDepthError(f"depth must be positive, got {self.depth}")
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)

    def faces_camera(self, ray: np.ndarray) -> bool:
        """True when the normal points toward the camera along `ray`."""
        return float(np.dot(self.normal, ray)) < 0.0


def pixel_ray(K: np.ndarray, pixel) -> np.ndarray:
    """Camera-frame viewing ray with z = 1 for pixel coordinates.

    Accepts a single (x, y) pair or an (..., 2) array; returns (..., 3).
    """
    p = np.asarray(pixel, dtype=np.float64)
    ones = np.ones(p.shape[:-1] + (1,), dtype=np.float64)
    hom = np.concatenate([p, ones], axis=-1)
    return hom @ np.linalg.inv(K).T


def project(cam: CameraModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Project world point(s) X to pixel coordinates plus depth.

    Args:
        cam: camera.
        X: (..., 3) world points.

    Returns:
        Tuple of pixel coordinates (..., 2) and camera-frame depth (...).

    Raises:
        BehindCameraError: if any point has non-positive depth.
    """
    Xw = np.asarray(X, dtype=np.float64)
    x_cam = (Xw - cam.C) @ cam.R.T
    depth = x_cam[..., 2]
    if np.any(depth <= 0.0):
        raise BehindCameraError("point(s) behind the camera (depth <= 0)")
    hom = x_cam @ cam.K.T
    pixel = hom[..., :2] / hom[..., 2:3]
    return pixel, depth


def unproject(cam: CameraModel, pixel, depth) -> np.ndarray:
    """Inverse of :func:`project`: pixel + depth -> world point(s)."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
        raise NonPositiveDepthError("depth must be positive and finite")
    ray = pixel_ray(cam.K, pixel)
    x_cam = ray * d[..., None]
    return x_cam @ cam.R + cam.C


def relative_motion(ref: CameraModel, src: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Rigid motion taking reference-camera coordinates into the source camera.

    Returns (R_rel, t_rel) with x_src = R_rel @ x_ref + t_rel.
    """
    R_rel = src.R @ ref.R.T
    t_rel = src.R @ (ref.C - src.C)
    return R_rel, t_rel


def plane_homography(
    ref: CameraModel, src: CameraModel, pixel, h: PlaneHypothesis
) -> np.ndarray:
    """Homography induced by the plane through `pixel` at hypothesis `h`.

    The plane passes through the reference-frame point depth * ray(pixel) with
    normal h.normal; the returned 3x3 matrix maps homogeneous reference pixels
    to homogeneous source pixels.
    """
    ray = pixel_ray(ref.K, np.asarray(pixel, dtype=np.float64))
    zeta = h.depth * float(ray @ h.normal)  # n . X_p, negative when camera-facing
    if abs(zeta) < 1e-15:
        raise DegenerateGeometryError("plane passes through the camera center")
    R_rel, t_rel = relative_motion(ref, src)
    K_inv = np.linalg.inv(ref.K)
    return src.K @ (R_rel + np.outer(t_rel, h.normal) / zeta) @ K_inv


def plane_induced_correspondence(
    ref: CameraModel, src: CameraModel, pixel, h: PlaneHypothesis
) -> np.ndarray:
    """Map `pixel` into the source view through the plane at hypothesis `h`.

    Raises:
        OutOfBoundsError: when the warped pixel leaves the source image or the
            plane point lies behind the source camera (callers treat the
            sample as invalid).
    """
    H = plane_homography(ref, src, pixel, h)
    p = np.asarray(pixel, dtype=np.float64)
    q = H @ np.array([p[0], p[1], 1.0])
    if q[2] <= 1e-15:
        raise OutOfBoundsError("plane point behind the source camera")
    out = q[:2] / q[2]
    if not (0.0 <= out[0] <= src.width - 1 and 0.0 <= out[1] <= src.height - 1):
        raise OutOfBoundsError(f"warped pixel {out} outside source image")
    return out


def reanchor_depth(K: np.ndarray, anchor_pixel, depth: float, normal, target_pixel) -> float:
    """Depth of the plane (anchor_pixel, depth, normal) along the target ray.

    This is how a neighbour's plane hypothesis propagates to a new pixel: the
    3D plane is kept and re-intersected with the target pixel's viewing ray.
    The result may be non-positive or huge for near-parallel rays; callers
    must validate against the scene depth range.
    """
    n = np.asarray(normal, dtype=np.float64)
    r_anchor = pixel_ray(K, np.asarray(anchor_pixel, dtype=np.float64))
    r_target = pixel_ray(K, np.asarray(target_pixel, dtype=np.float64))
    den = float(n @ r_target)
    if abs(den) < 1e-15:
        raise DegenerateGeometryError("target ray parallel to the plane")
    return depth * float(n @ r_anchor) / den


def depth_edge_consistency(
    h_a: PlaneHypothesis,
    h_b: PlaneHypothesis,
    rel_tol: float,
    angle_tol_deg: float = 10.0,
) -> bool:
    """Consistency predicate used by fusion.

    True iff |d_a - d_b| / d_a <= rel_tol and the angle between the normals is
    at most angle_tol_deg degrees. Both hypotheses must be expressed in the
    same camera frame (the caller transports them).
    """
    if abs(h_a.depth - h_b.depth) / h_a.depth > rel_tol:
        return False
    cosang = float(np.clip(np.dot(h_a.normal, h_b.normal), -1.0, 1.0))
    return np.degrees(np.arccos(cosang)) <= angle_tol_deg


def rotation_from_quaternion(qw: float, qx: float, qy: float, qz: float) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion (COLMAP ordering)."""
    q = np.array([qw, qx, qy, qz], dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise InvalidCameraError("zero quaternion")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
