"""Normal refinement on the unit sphere and depth-interval perturbation.

Normals are perturbed by two consecutive rotations about tangent-plane axes
(the two-term rotation form, whose dropped term vanishes for axes orthogonal
to the operand). After an accepted step, the next tangent frame is steered
along the accepted displacement so successive perturbations descend along
the cost surface instead of re-randomizing blindly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidFrameError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class TangentFrame:
    """Two orthonormal axes spanning the tangent plane of a unit normal."""

    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self) -> None:
        e1 = np.asarray(self.e1, dtype=np.float64)
        e2 = np.asarray(self.e2, dtype=np.float64)
        e1.setflags(write=False)
        e2.setflags(write=False)
        object.__setattr__(self, "e1", e1)
        object.__setattr__(self, "e2", e2)

    def check_against(self, n: np.ndarray) -> None:
        n = np.asarray(n, dtype=np.float64)
        if (
            abs(float(self.e1 @ n)) > _ORTHO_TOL
            or abs(float(self.e2 @ n)) > _ORTHO_TOL
            or abs(float(self.e1 @ self.e2)) > _ORTHO_TOL
            or abs(np.linalg.norm(self.e1) - 1.0) > _ORTHO_TOL
            or abs(np.linalg.norm(self.e2) - 1.0) > _ORTHO_TOL
        ):
            raise InvalidFrameError("tangent frame is not orthonormal to the normal")


def random_tangent_frame(n: np.ndarray, rng: np.random.Generator) -> TangentFrame:
    """Deterministic-under-seed random orthonormal frame in n's tangent plane.

    Gram-Schmidt against the coordinate axis least aligned with n, then a
    random rotation of the resulting pair within the tangent plane.
    """
    n = np.asarray(n, dtype=np.float64)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    e1 = axis - (axis @ n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    r1 = math.cos(phi) * e1 + math.sin(phi) * e2
    r2 = np.cross(n, r1)
    return TangentFrame(e1=r1, e2=r2 / np.linalg.norm(r2))


def rotate_normal(
    n: np.ndarray,
    frame: TangentFrame,
    theta1: float,
    theta2: float,
    full_rodrigues: bool = False,
) -> np.ndarray:
    """Two consecutive tangent-axis rotations of a unit normal.

    The default drops the (1-cos)(e.n)e term of each rotation: it is exactly
    zero for the first (e1 is orthogonal to n) and small for the second
    (e2 is orthogonal to n but not necessarily to the once-rotated normal).
    ``full_rodrigues`` applies the complete formula for the second rotation.

    Raises:
        InvalidFrameError: if the frame is not orthonormal to n.
    """
    n = np.asarray(n, dtype=np.float64)
    frame.check_against(n)
    n1 = math.cos(theta1) * n + math.sin(theta1) * np.cross(frame.e1, n)
    if full_rodrigues:
        e2 = frame.e2
        n2 = (
            math.cos(theta2) * n1
            + math.sin(theta2) * np.cross(e2, n1)
            + (1.0 - math.cos(theta2)) * float(e2 @ n1) * e2
        )
    else:
        n2 = math.cos(theta2) * n1 + math.sin(theta2) * np.cross(frame.e2, n1)
    return n2 / np.linalg.norm(n2)


def angle_schedule(
    i: int, n_max: int, rng: np.random.Generator, count: int = 2
) -> np.ndarray:
    """Uniform perturbation angles in degrees with a geometrically shrinking range.

    Iteration i of n_max draws from [0, 5 * 2**(n_max - i)] degrees, so the
    search radius halves every round (20, 10, 5 degrees for n_max = 3).
    """
    if not 1 <= i <= n_max:
        raise ValueError(f"iteration index {i} outside 1..{n_max}")
    return rng.uniform(0.0, 5.0 * 2.0 ** (n_max - i), size=count)


def descend_frame(
    n_old: np.ndarray,
    n_new: np.ndarray,
    rng: np.random.Generator,
    raw: bool = False,
) -> TangentFrame:
    """Tangent frame for the next round, steered along the accepted step.

    e1 follows the displacement n_new - n_old projected into the tangent
    plane at n_new (``raw`` skips the projection and only renormalizes,
    reproducing the literal update); e2 completes the right-handed frame.
    Falls back to a random frame when the displacement degenerates.
    """
    n_old = np.asarray(n_old, dtype=np.float64)
    n_new = np.asarray(n_new, dtype=np.float64)
    step = n_new - n_old
    if raw:
        e1 = step.copy()
    else:
        e1 = step - (step @ n_new) * n_new
    norm = np.linalg.norm(e1)
    if norm < 1e-9:
        return random_tangent_frame(n_new, rng)
    e1 /= norm
    e2 = np.cross(e1, n_new)
    norm2 = np.linalg.norm(e2)
    if norm2 < 1e-9:
        return random_tangent_frame(n_new, rng)
    return TangentFrame(e1=e1, e2=e2 / norm2)


def perturb_normal_additive(
    n: np.ndarray, rng: np.random.Generator, scale: float = 0.25
) -> np.ndarray:
    """Axis-additive perturbation baseline: n + uniform offsets, renormalized.

    Kept as an ablation of the spherical scheme; unlike tangent rotations its
    effective step size depends on the normal's orientation.
    """
    n = np.asarray(n, dtype=np.float64)
    cand = n + rng.uniform(-scale, scale, size=3)
    norm = np.linalg.norm(cand)
    if norm < 1e-9:
        return n.copy()
    return cand / norm


def propose_depths(
    depth: float,
    interval: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[float, float]:
    """(current depth, uniform draw from the pixelwise interval)."""
    lo, hi = interval
    if not lo <= hi:
        raise ValueError(f"invalid depth interval ({lo}, {hi})")
    return depth, float(rng.uniform(lo, hi))


def refine_pixel(
    depth: float,
    normal: np.ndarray,
    ray: np.ndarray,
    frame: TangentFrame,
    theta1_deg: float,
    theta2_deg: float,
    depth_draw: float,
    incumbent_cost: float,
    eval_cost,
    mode: str = "spherical",
    full_rodrigues: bool = False,
    additive_offsets: np.ndarray | None = None,
) -> tuple[float, np.ndarray, float, bool, bool]:
    """One per-pixel refinement step; pure given pre-drawn random values.

    Proposes the cross of {current normal, perturbed normal} with
    {current depth, drawn depth} minus the incumbent pair, evaluates each
    candidate with ``eval_cost(depth, normal) -> cost``, and keeps the
    strict argmin against ``incumbent_cost`` (ties keep the incumbent;
    candidate ties keep the earliest). Back-facing perturbed normals are
    discarded before evaluation.

    Args:
        mode: "spherical" rotates within the tangent frame; "eq9" adds
            ``additive_offsets`` to the normal and renormalizes.

    Returns:
        (depth', normal', cost', rotation_accepted, changed).
    """
    normal = np.asarray(normal, dtype=np.float64)
    ray = np.asarray(ray, dtype=np.float64)
    if mode == "spherical":
        n2 = rotate_normal(
            normal,
            frame,
            math.radians(theta1_deg),
            math.radians(theta2_deg),
            full_rodrigues=full_rodrigues,
        )
    elif mode == "eq9":
        if additive_offsets is None:
            raise ValueError("eq9 mode needs pre-drawn additive offsets")
        cand = normal + np.asarray(additive_offsets, dtype=np.float64)
        norm = np.linalg.norm(cand)
        n2 = cand / norm if norm >= 1e-9 else normal
    else:
        raise ValueError(f"unknown refinement mode {mode!r}")

    candidates: list[tuple[float, np.ndarray, bool]] = [(depth_draw, normal, False)]
    if float(n2 @ ray) < -1e-9:
        candidates.append((depth, n2, True))
        candidates.append((depth_draw, n2, True))

    best_cost = incumbent_cost
    best = None
    for cand_depth, cand_normal, rotated in candidates:
        c = float(eval_cost(cand_depth, cand_normal))
        if c < best_cost:
            best_cost = c
            best = (cand_depth, cand_normal, rotated)
    if best is None:
        return depth, normal, incumbent_cost, False, False
    return best[0], best[1], best_cost, best[2], True
