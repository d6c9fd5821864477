"""Instance label maps and the window geometry derived from them.

Everything here works in image coordinates: x grows rightward (columns),
y grows downward (rows). Boundary distances are run lengths of same-label
pixels; the derived patch windows and propagation branches always stay
inside the pixel's own instance, which also keeps them inside the image
(the image border counts as an instance boundary).

Sign note for the center offset: the offset formula is evaluated so that
each component points toward the *smaller* boundary distance of its axis
(for the horizontal axis that is the literal (d_l - d_r) form; the vertical
component is expressed here as (d_u - d_d) because our y axis points down).
The subsequent clamp keeps the whole window inside [-d_l, +d_r] x [-d_u, +d_d].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyPatchError
from .imaging import ImageGrid

#: Directions in tie-break order; used everywhere a direction index appears.
DIRECTIONS = ("u", "r", "d", "l", "ur", "dr", "dl", "ul")

#: Unit steps (dx, dy) of the four axis directions, image coordinates.
_AXIS_STEPS = {"u": (0, -1), "r": (1, 0), "d": (0, 1), "l": (-1, 0)}


def round_half_up(x: float) -> int:
    """Nearest integer with .5 ties rounded toward +inf."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class InstanceLabelMap:
    """Per-pixel non-negative instance ids; 0 means unlabeled."""

    width: int
    height: int
    labels: np.ndarray  # (height, width) int32

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.shape != (self.height, self.width):
            raise ValueError(
                f"label shape {arr.shape} does not match {self.height}x{self.width}"
            )
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("labels must be integers")
        if arr.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        arr = arr.astype(np.int32, copy=False)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)


def downsample_labels(m: InstanceLabelMap, width: int, height: int) -> InstanceLabelMap:
    """Nearest-neighbor label reduction onto a floor-halved level grid."""
    if width * 2 > m.width + 1 or height * 2 > m.height + 1:
        raise ValueError("target dims are not a halving of the source dims")
    return InstanceLabelMap(width=width, height=height, labels=m.labels[: 2 * height : 2, : 2 * width : 2])


@dataclass(frozen=True)
class BoundaryDistances:
    """Same-label run lengths per pixel in the four axis directions.

    Each entry counts how many pixels one can step from p (exclusive) in a
    direction before meeting a different label, the image border, or the
    cap. Unlabeled pixels (label 0) carry zero in all four directions.
    """

    d_l: np.ndarray
    d_r: np.ndarray
    d_d: np.ndarray
    d_u: np.ndarray

    def at(self, x: int, y: int) -> tuple[int, int, int, int]:
        """(d_l, d_r, d_d, d_u) at one pixel."""
        return (
            int(self.d_l[y, x]),
            int(self.d_r[y, x]),
            int(self.d_d[y, x]),
            int(self.d_u[y, x]),
        )

    def stacked(self) -> np.ndarray:
        """(h, w, 4) view ordered (d_l, d_r, d_d, d_u)."""
        return np.stack([self.d_l, self.d_r, self.d_d, self.d_u], axis=-1)


def boundary_distances(m: InstanceLabelMap, cap_distance: int) -> BoundaryDistances:
    """Directional same-label run lengths via running scans, O(w*h) each.

    Args:
        m: instance label map.
        cap_distance: upper bound applied to every distance, >= 1.
    """
    if cap_distance < 1:
        raise ValueError("cap_distance must be >= 1")
    lab = m.labels
    h, w = lab.shape
    d_l = np.zeros((h, w), dtype=np.int32)
    d_r = np.zeros((h, w), dtype=np.int32)
    d_u = np.zeros((h, w), dtype=np.int32)
    d_d = np.zeros((h, w), dtype=np.int32)

    for j in range(1, w):
        same = lab[:, j] == lab[:, j - 1]
        d_l[:, j] = np.minimum(d_l[:, j - 1] + 1, cap_distance) * same
    for j in range(w - 2, -1, -1):
        same = lab[:, j] == lab[:, j + 1]
        d_r[:, j] = np.minimum(d_r[:, j + 1] + 1, cap_distance) * same
    for i in range(1, h):
        same = lab[i, :] == lab[i - 1, :]
        d_u[i, :] = np.minimum(d_u[i - 1, :] + 1, cap_distance) * same
    for i in range(h - 2, -1, -1):
        same = lab[i, :] == lab[i + 1, :]
        d_d[i, :] = np.minimum(d_d[i + 1, :] + 1, cap_distance) * same

    unlabeled = lab == 0
    for arr in (d_l, d_r, d_u, d_d):
        arr[unlabeled] = 0
        arr.setflags(write=False)
    return BoundaryDistances(d_l=d_l, d_r=d_r, d_d=d_d, d_u=d_u)


@dataclass(frozen=True)
class DeformedPatch:
    """A reshaped, re-centered matching window with its sample lattice.

    ``samples`` holds (dx, dy) offsets relative to the anchor pixel, already
    including the center offset; they stay inside the instance run given by
    the input distances whenever the run can hold the window, and park on the
    run midpoint otherwise (the shifted *center* is always inside the run).
    ``offset_raw`` is the pre-clamp offset from the shape formula (kept for
    diagnostics/tests).
    """

    l_h: int
    l_v: int
    offset: tuple[int, int]
    offset_raw: tuple[float, float]
    samples: np.ndarray  # (n, 2) int32 offsets (dx, dy)
    degenerate: bool
    stride: int = 1

    @property
    def sample_count(self) -> int:
        return int(self.samples.shape[0])


def sample_budget(l_side: int) -> int:
    """Hard cap on emitted samples for base side length L: floor((L/2)^2)."""
    return int(math.floor((l_side / 2.0) ** 2))


def _window_halves(span: int) -> tuple[int, int]:
    lo = span // 2
    return lo, span - 1 - lo


def _clamped_offset(raw: float, span: int, d_neg: int, d_pos: int) -> int:
    """Clamp a rounded window-center offset so the window fits in the run."""
    half_lo, half_hi = _window_halves(span)
    lo = -d_neg + half_lo
    hi = d_pos - half_hi
    if lo > hi:
        # Window wider than the run; park the center on the run midpoint,
        # which provably stays inside [-d_neg, +d_pos].
        mid = round_half_up((lo + hi) / 2.0)
        return int(np.clip(mid, -d_neg, d_pos))
    return int(np.clip(round_half_up(raw), lo, hi))


def deform_patch(dist: tuple[int, int, int, int], l_side: int) -> DeformedPatch:
    """Reshape and re-center an L x L window from boundary distances.

    Args:
        dist: (d_l, d_r, d_d, d_u) at the pixel.
        l_side: base side length L, odd and >= 5.

    Returns:
        The deformed window. All four distances zero yields the flagged
        degenerate 1x1 window holding only the center sample.
    """
    if l_side < 5 or l_side % 2 == 0:
        raise ValueError("base side length must be odd and >= 5")
    d_l, d_r, d_d, d_u = (int(v) for v in dist)
    if min(d_l, d_r, d_d, d_u) < 0:
        raise ValueError("distances must be non-negative")
    total = d_l + d_r + d_d + d_u
    if total == 0:
        center = np.zeros((1, 2), dtype=np.int32)
        center.setflags(write=False)
        return DeformedPatch(
            l_h=1, l_v=1, offset=(0, 0), offset_raw=(0.0, 0.0),
            samples=center, degenerate=True,
        )

    l_h = round_half_up(l_side * (d_l + d_r) / total)
    l_h = int(np.clip(l_h, 1, l_side - 1))
    l_v = l_side - l_h

    sum_x = d_l + d_r
    sum_y = d_u + d_d
    raw_x = (d_l - d_r) / sum_x * l_h if sum_x > 0 else 0.0
    raw_y = (d_u - d_d) / sum_y * l_v if sum_y > 0 else 0.0
    off_x = _clamped_offset(raw_x, l_h, d_l, d_r)
    off_y = _clamped_offset(raw_y, l_v, d_u, d_d)

    lo_x, _ = _window_halves(l_h)
    lo_y, _ = _window_halves(l_v)
    ix, iy = np.meshgrid(np.arange(l_h), np.arange(l_v), indexing="xy")
    dx = (ix.ravel() - lo_x + off_x).astype(np.int32)
    dy = (iy.ravel() - lo_y + off_y).astype(np.int32)
    samples = np.stack([dx, dy], axis=-1)

    # Because l_h + l_v = L, the dense window holds at most
    # floor(L/2)*ceil(L/2) = floor((L/2)^2) cells, so the budget holds by
    # construction; the decimation below only guards pathological inputs.
    cap = sample_budget(l_side)
    if samples.shape[0] > cap:
        idx = (np.arange(cap, dtype=np.int64) * samples.shape[0]) // cap
        samples = samples[idx]
    samples.setflags(write=False)
    return DeformedPatch(
        l_h=l_h, l_v=l_v, offset=(off_x, off_y), offset_raw=(raw_x, raw_y),
        samples=samples, degenerate=False,
    )


@dataclass(frozen=True)
class PropagationPattern:
    """Branch geometry and the 8 load-balanced search domains at one pixel.

    ``domains`` holds, per direction in ``DIRECTIONS`` order, the (dx, dy)
    offsets assigned to that domain after splitting each opposite-direction
    pair at the midpoint of its merged segment.
    """

    lengths: tuple[float, ...]  # 8 entries, DIRECTIONS order
    angles: tuple[float, ...]  # radians for (ur, dr, dl, ul)
    domains: tuple[np.ndarray, ...]  # 8 arrays of (n_i, 2) int32 offsets


def _ray_samples(cx: float, cy: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer samples along the segment to (cx, cy) and their distances."""
    length = math.hypot(cx, cy)
    n = int(length + 0.5)
    if n <= 0:
        return np.zeros((0, 2), dtype=np.int32), np.zeros(0)
    i = np.arange(1, n + 1, dtype=np.float64)
    xs = np.floor(i * cx / n + 0.5).astype(np.int32)
    ys = np.floor(i * cy / n + 0.5).astype(np.int32)
    return np.stack([xs, ys], axis=-1), i * length / n


def propagation_pattern(
    dist: tuple[int, int, int, int], l_h: int, l_v: int
) -> PropagationPattern:
    """Directional branch lengths, slant angles, and the domain partition.

    Axis branch lengths split each patch side in proportion to the boundary
    distances (equal split when both distances vanish); slanted branches
    combine the two adjacent axis lengths.
    """
    d_l, d_r, d_d, d_u = (int(v) for v in dist)
    sum_y = d_u + d_d
    sum_x = d_l + d_r
    l_u = d_u / sum_y * l_v if sum_y > 0 else l_v / 2.0
    l_d = d_d / sum_y * l_v if sum_y > 0 else l_v / 2.0
    l_l = d_l / sum_x * l_h if sum_x > 0 else l_h / 2.0
    l_r = d_r / sum_x * l_h if sum_x > 0 else l_h / 2.0

    l_ur = math.hypot(l_u, l_r)
    l_dr = math.hypot(l_d, l_r)
    l_dl = math.hypot(l_d, l_l)
    l_ul = math.hypot(l_u, l_l)
    angles = (
        math.atan2(l_u, l_r),
        math.atan2(l_d, l_r),
        math.atan2(l_d, l_l),
        math.atan2(l_u, l_l),
    )

    # Integer sample positions and center distances per direction.
    axis_len = {"u": l_u, "r": l_r, "d": l_d, "l": l_l}
    rays: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, (sx, sy) in _AXIS_STEPS.items():
        n = round_half_up(axis_len[name])
        t = np.arange(1, n + 1, dtype=np.int32)
        pts = np.stack([t * sx, t * sy], axis=-1).astype(np.int32)
        rays[name] = (pts, t.astype(np.float64))
    rays["ur"] = _ray_samples(l_r, -l_u)
    rays["dr"] = _ray_samples(l_r, l_d)
    rays["dl"] = _ray_samples(-l_l, l_d)
    rays["ul"] = _ray_samples(-l_l, -l_u)

    # Split each opposite pair at the midpoint of the merged segment.
    pair_len = {
        "u": l_u, "d": l_d, "r": l_r, "l": l_l,
        "ur": l_ur, "dl": l_dl, "ul": l_ul, "dr": l_dr,
    }
    domains: dict[str, np.ndarray] = {}
    for pos, neg in (("u", "d"), ("r", "l"), ("ur", "dl"), ("ul", "dr")):
        mid = (pair_len[pos] - pair_len[neg]) / 2.0
        pts_p, s_p = rays[pos]
        pts_n, s_n = rays[neg]
        pts = np.concatenate([pts_p, pts_n], axis=0)
        signed = np.concatenate([s_p, -s_n])
        to_pos = signed > mid
        domains[pos] = pts[to_pos]
        domains[neg] = pts[~to_pos]

    # Rounding can land two ray steps on the same cell, and degenerate side
    # lengths collapse a slanted ray onto an axis ray; keep the partition
    # disjoint by dropping repeats in tie-break order.
    taken: set[tuple[int, int]] = set()
    for name in DIRECTIONS:
        pts = domains[name]
        keep = []
        for i, point in enumerate(map(tuple, pts)):
            if point not in taken:
                taken.add(point)
                keep.append(i)
        domains[name] = pts[keep]

    return PropagationPattern(
        lengths=(l_u, l_r, l_d, l_l, l_ur, l_dr, l_dl, l_ul),
        angles=angles,
        domains=tuple(
            np.ascontiguousarray(domains[name], dtype=np.int32) for name in DIRECTIONS
        ),
    )


def depth_interval(
    patch: DeformedPatch,
    pixel: tuple[int, int],
    depth_map: np.ndarray,
    depth_range: tuple[float, float],
) -> tuple[float, float]:
    """(min, max) of current depths over the patch, clipped to the range.

    Raises:
        EmptyPatchError: when no patch sample lands inside the map.
    """
    h, w = depth_map.shape
    xs = patch.samples[:, 0] + int(pixel[0])
    ys = patch.samples[:, 1] + int(pixel[1])
    inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    if not np.any(inside):
        raise EmptyPatchError(f"patch at {pixel} has no in-bounds samples")
    vals = depth_map[ys[inside], xs[inside]]
    lo = float(np.clip(vals.min(), depth_range[0], depth_range[1]))
    hi = float(np.clip(vals.max(), depth_range[0], depth_range[1]))
    return lo, hi


def fallback_segment(
    img: ImageGrid, color_tol: float = 0.08, min_region: int = 16
) -> InstanceLabelMap:
    """Connected components over near-constant color as a stand-in labeler.

    Two 4-neighbors join when their colors differ by less than ``color_tol``
    in max-norm. Components smaller than ``min_region`` become unlabeled (0);
    the rest are renumbered 1..N in scan order. Meant for synthetic
    piecewise-constant scenes, not as a real segmenter.
    """
    h, w = img.height, img.width
    flat = img.samples.reshape(h * w, img.channels)
    parent = np.arange(h * w, dtype=np.int64)

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    samples = img.samples
    right = np.abs(samples[:, 1:, :] - samples[:, :-1, :]).max(axis=-1) < color_tol
    down = np.abs(samples[1:, :, :] - samples[:-1, :, :]).max(axis=-1) < color_tol
    ys, xs = np.nonzero(right)
    for y, x in zip(ys.tolist(), xs.tolist()):
        union(y * w + x, y * w + x + 1)
    ys, xs = np.nonzero(down)
    for y, x in zip(ys.tolist(), xs.tolist()):
        union(y * w + x, (y + 1) * w + x)

    roots = np.array([find(i) for i in range(h * w)], dtype=np.int64)
    uniq, inverse, counts = np.unique(roots, return_inverse=True, return_counts=True)
    labels = np.zeros(h * w, dtype=np.int32)
    next_id = 1
    for comp in range(uniq.size):
        if counts[comp] >= min_region:
            labels[inverse == comp] = next_id
            next_id += 1
    del flat
    return InstanceLabelMap(width=w, height=h, labels=labels.reshape(h, w))
