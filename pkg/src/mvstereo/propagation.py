"""Checkerboard propagation with directional search domains.

Each sweep updates one pixel parity while reading the frozen other parity:
for every active pixel the eight directional domains (unioned across all
pyramid levels) each contribute their stored-cost-minimal hypothesis, the
winners are re-anchored onto the pixel's viewing ray and the full aggregated
cost decides what gets committed. `propagate_pixel` / `evaluate_and_commit`
are the per-pixel reference forms; `run_sweep` is the batched production
path and must agree with them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import geometry
from ._engine import EngineContext, evaluate_hypotheses, reanchor
from .segmentation import DIRECTIONS, PropagationPattern

logger = logging.getLogger(__name__)

_INF = float("inf")


def checkerboard_schedule(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Red/black partition of the pixel grid by coordinate-sum parity.

    Returns:
        Two flat-index arrays: pixels with even ``x + y`` first, odd second.
        Together they cover every pixel exactly once.
    """
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    parity = ((xs + ys) & 1).ravel()
    flat = np.arange(width * height)
    return flat[parity == 0], flat[parity == 1]


@dataclass(frozen=True)
class Candidate:
    """Stored-cost minimum of one directional search domain."""

    direction: int
    level: int
    x: int
    y: int
    stored_cost: float
    depth: float
    normal: np.ndarray


@dataclass(frozen=True)
class CandidateSet:
    """Per-direction domain winners feeding one pixel's update."""

    entries: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.entries)


def propagate_pixel(
    pixel: tuple[int, int],
    level: int,
    patterns: Sequence[PropagationPattern | None],
    cost_maps: Sequence[np.ndarray],
    depth_maps: Sequence[np.ndarray],
    normal_maps: Sequence[np.ndarray],
    multi_scale: bool = True,
) -> CandidateSet:
    """Collect the minimal-stored-cost hypothesis of each search domain.

    Args:
        pixel: (x, y) at the working level.
        level: working pyramid level of ``pixel``.
        patterns: one pattern per level, already looked up at the pixel's
            counterpart position on that level; None marks a degenerate
            (single-pixel instance) counterpart contributing nothing.
        cost_maps/depth_maps/normal_maps: stored per-level state.

    Returns:
        Up to eight candidates, one per direction with a non-empty union;
        ties inside a domain resolve to the first sample in enumeration
        order (levels fine to coarse, domain samples in pattern order).
    """
    levels = range(len(cost_maps)) if multi_scale else (level,)
    entries = []
    for d in range(len(DIRECTIONS)):
        best: Candidate | None = None
        for m in levels:
            pat = patterns[m]
            if pat is None:
                continue
            h_m, w_m = cost_maps[m].shape
            ax, ay = level_counterpart(pixel, level, m, w_m, h_m)
            for dx, dy in pat.domains[d]:
                sx, sy = ax + int(dx), ay + int(dy)
                if not (0 <= sx < w_m and 0 <= sy < h_m):
                    continue
                c = float(cost_maps[m][sy, sx])
                if best is None or c < best.stored_cost:
                    best = Candidate(
                        direction=d,
                        level=m,
                        x=sx,
                        y=sy,
                        stored_cost=c,
                        depth=float(depth_maps[m][sy, sx]),
                        normal=np.asarray(normal_maps[m][sy, sx], dtype=np.float64),
                    )
        if best is not None:
            entries.append(best)
    return CandidateSet(entries=tuple(entries))


def level_counterpart(
    pixel: tuple[int, int], from_level: int, to_level: int, to_width: int, to_height: int
) -> tuple[int, int]:
    """Map a pixel between pyramid levels, clipped to the target grid.

    Fine-to-coarse is a floor halving per level; coarse-to-fine lands on the
    center of the block the coarse pixel covers.
    """
    x, y = pixel
    delta = to_level - from_level
    if delta >= 0:
        x, y = x >> delta, y >> delta
    else:
        up = 1 << -delta
        x, y = x * up + up // 2, y * up + up // 2
    return min(x, to_width - 1), min(y, to_height - 1)


def evaluate_and_commit(
    pixel: tuple[int, int],
    candidates: CandidateSet,
    depth: float,
    normal: np.ndarray,
    cost: float,
    cams: Sequence[geometry.CameraModel],
    level: int,
    depth_range: tuple[float, float],
    eval_cost: Callable[[float, np.ndarray], float],
) -> tuple[float, np.ndarray, float, bool]:
    """Re-anchor candidate planes at the pixel and keep the strict argmin.

    Each candidate keeps its plane fixed in space: the depth is re-solved
    along the pixel's own viewing ray, clamped into the scene depth range.
    Back-facing transports are dropped. Ties keep the incumbent; candidate
    ties keep the lower direction index.

    Returns:
        (depth', normal', cost', changed).
    """
    ray_p = geometry.pixel_ray(cams[level].K, np.array(pixel, dtype=np.float64))
    best = (depth, np.asarray(normal, dtype=np.float64), float(cost), False)
    for cand in candidates.entries:
        if float(cand.normal @ ray_p) >= -1e-12:
            continue
        if cand.level == level:
            d_p = geometry.reanchor_depth(
                cams[level].K, (cand.x, cand.y), cand.depth, cand.normal, pixel
            )
        else:
            # cross-level transport: same plane equation, level-specific rays
            ray_q = geometry.pixel_ray(
                cams[cand.level].K, np.array([cand.x, cand.y], dtype=np.float64)
            )
            d_p = cand.depth * float(cand.normal @ ray_q) / float(cand.normal @ ray_p)
        d_p = float(np.clip(d_p, depth_range[0], depth_range[1]))
        c = float(eval_cost(d_p, cand.normal))
        if c < best[2]:
            best = (d_p, cand.normal, c, True)
    return best


def run_sweep(
    ctx: EngineContext,
    ref_id: int,
    level: int,
    parity: int,
    weights3: np.ndarray,
) -> int:
    """One batched checkerboard propagation sweep over a view level.

    Reads the pre-sweep state (all gathers happen before any write, so the
    frozen-other-parity contract holds even though domains reach both
    parities across levels), evaluates the eight domain winners per active
    pixel, and commits strict improvements together with their component
    maps.

    Returns:
        Number of pixels whose hypothesis changed.
    """
    ref = ctx.views[ref_id]
    tab = ref.tables[level]
    w, h = tab.width, tab.height
    even, odd = checkerboard_schedule(w, h)
    pix = even if parity == 0 else odd
    m = pix.shape[0]
    n_dir = len(DIRECTIONS)

    levels = range(ctx.level_count) if ctx.cfg_multi_scale_prop else (level,)
    cand_cost = np.full((m, n_dir), _INF)
    cand_level = np.zeros((m, n_dir), dtype=np.int64)
    cand_flat = np.zeros((m, n_dir), dtype=np.int64)

    for d in range(n_dir):
        parts_cost = []
        parts_flat = []
        parts_level = []
        for lev in levels:
            tabm = ref.tables[lev]
            pm = ctx.level_map[ref_id][(level, lev)][pix]
            idx = tabm.pat_index[pm]
            rel = tabm.pat_rel[idx, d].astype(np.int64)
            valid = tabm.pat_valid[idx, d]
            sx = (pm % tabm.width)[:, None] + rel[:, :, 0]
            sy = (pm // tabm.width)[:, None] + rel[:, :, 1]
            inb = valid & (sx >= 0) & (sx < tabm.width) & (sy >= 0) & (sy < tabm.height)
            flat = np.clip(sy, 0, tabm.height - 1) * tabm.width + np.clip(
                sx, 0, tabm.width - 1
            )
            c = np.where(inb, ref.cost[lev].ravel()[flat], _INF)
            parts_cost.append(c)
            parts_flat.append(flat)
            parts_level.append(np.full(c.shape[1], lev, dtype=np.int64))
        cat_cost = np.concatenate(parts_cost, axis=1)
        cat_flat = np.concatenate(parts_flat, axis=1)
        cat_level = np.concatenate(parts_level)
        win = np.argmin(cat_cost, axis=1)
        rows = np.arange(m)
        cand_cost[:, d] = cat_cost[rows, win]
        cand_flat[:, d] = cat_flat[rows, win]
        cand_level[:, d] = cat_level[win]

    valid = np.isfinite(cand_cost)
    pix_rep = np.repeat(pix, n_dir)
    depth_c, normal_c, ok = reanchor(
        ctx,
        ref_id,
        level,
        pix_rep,
        cand_level.ravel(),
        cand_flat.ravel(),
        valid.ravel(),
    )

    eval_cost = np.full(m * n_dir, _INF)
    eval_comps = np.zeros((m * n_dir, 3))
    rows = np.flatnonzero(ok)
    if rows.size:
        c, comps = evaluate_hypotheses(
            ctx, ref_id, level, pix_rep[rows], depth_c[rows], normal_c[rows], weights3
        )
        eval_cost[rows] = c
        eval_comps[rows] = comps

    inc_cost = ref.cost[level].ravel()[pix]
    table = np.concatenate([inc_cost[:, None], eval_cost.reshape(m, n_dir)], axis=1)
    win = np.argmin(table, axis=1)
    changed = np.flatnonzero(win > 0)
    if changed.size:
        sel = changed * n_dir + (win[changed] - 1)
        tgt = pix[changed]
        ref.depth[level].ravel()[tgt] = depth_c[sel]
        ref.normal[level].reshape(-1, 3)[tgt] = normal_c[sel]
        ref.cost[level].ravel()[tgt] = eval_cost[sel]
        ref.comps[level].reshape(-1, 3)[tgt] = eval_comps[sel]
    return int(changed.size)
