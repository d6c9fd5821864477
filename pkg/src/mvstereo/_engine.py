"""Batched evaluation engine behind the per-pixel reference operations.

Builds, once per view and pyramid level, every hypothesis-independent table
(deformed-window sample lattices, bilateral weights, propagation domains,
pixel rays, Laplacian fields) and evaluates whole batches of plane
hypotheses against all source views with plain vectorized numpy. The
per-pixel modules (cost, segmentation, refinement) define the semantics;
this module must agree with them bit-for-bit on shared math and is
cross-checked against them in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from ._parallel import run_chunked
from .cost import SENTINEL_COST, VARIANCE_FLOOR
from .imaging import ImageGrid, ScalePyramid, laplacian
from .segmentation import (
    DeformedPatch,
    InstanceLabelMap,
    PropagationPattern,
    boundary_distances,
    deform_patch,
    propagation_pattern,
)

_EPS_Z = 1e-15
_EPS_ZETA = 1e-12

#: Classic fixed matching window: every other pixel of an 11x11 grid minus
#: the center cross, the sampling the backbone methods use.
CLASSIC_OFFSETS = np.array(
    [(dx, dy) for dy in (-5, -3, -1, 1, 3, 5) for dx in (-5, -3, -1, 1, 3, 5)],
    dtype=np.int32,
)


@dataclass
class LevelTables:
    """Static per-(view, level) data shared by every sweep."""

    width: int
    height: int
    cam: geometry.CameraModel
    gray: np.ndarray  # (h, w) f64
    lap: np.ndarray  # (h, w, c) f64
    labels: InstanceLabelMap
    dist_rows: np.ndarray  # (P, 4) int32 (d_l, d_r, d_d, d_u)
    # deformed matching windows
    samp_x: np.ndarray  # (P, S) int32, absolute, clipped
    samp_y: np.ndarray  # (P, S) int32
    samp_xf: np.ndarray  # (P, S) f64 copy of samp_x (warp input)
    samp_yf: np.ndarray  # (P, S) f64 copy of samp_y
    samp_valid: np.ndarray  # (P, S) bool
    weights: np.ndarray  # (P, S) f64 bilateral weights (0 on invalid lanes)
    refvals: np.ndarray  # (P, S) f64 reference grays
    degenerate: np.ndarray  # (P,) bool
    # propagation domains, relative offsets shared through unique patterns
    pat_index: np.ndarray  # (P,) int32 into pat_rel
    pat_rel: np.ndarray  # (U, 8, D, 2) int16
    pat_valid: np.ndarray  # (U, 8, D) bool
    rays: np.ndarray  # (P, 3) f64


@dataclass
class ViewRuntime:
    """Mutable optimization state of one reference view."""

    view_id: int
    pyramid: ScalePyramid
    cams: list[geometry.CameraModel]
    tables: list[LevelTables]
    depth: list[np.ndarray]  # per level (h, w) f64
    normal: list[np.ndarray]  # per level (h, w, 3) f64
    cost: list[np.ndarray]  # per level (h, w) f64 committed aggregated cost
    comps: list[np.ndarray]  # per level (h, w, 3) f64 stored components
    e1: list[np.ndarray]  # per level (h, w, 3) f64 tangent frame axes
    e2: list[np.ndarray]
    estimated: bool = False


@dataclass
class EngineContext:
    """Everything evaluation needs across views at all levels."""

    views: list[ViewRuntime]
    depth_range: tuple[float, float]
    level_count: int
    # pair_a[r][s][m], pair_b[r][s][m]: plane-warp matrices between levels m
    pair_a: dict
    pair_b: dict
    kinv: dict  # kinv[v][m]: inverse intrinsics (3, 3); mu = (n @ kinv) . (x, y, 1)
    level_map: dict  # level_map[v][(l, m)]: (P_l,) int32 flat indices at m
    cfg_top_m: int = 2
    cfg_min_samples: int = 9
    cfg_tau: float = 2.0
    cfg_tau_rp: float = 2.0
    cfg_pc_literal: bool = True
    cfg_multi_scale_cost: bool = True
    cfg_multi_scale_prop: bool = True
    cfg_threads: int = 1


def _pattern_tables(patterns: list[PropagationPattern | None]):
    """Pad a list of per-unique patterns into dense (U, 8, D, 2) tables."""
    max_d = 1
    for pat in patterns:
        if pat is None:
            continue
        for dom in pat.domains:
            max_d = max(max_d, dom.shape[0])
    u = len(patterns)
    rel = np.zeros((u, 8, max_d, 2), dtype=np.int16)
    valid = np.zeros((u, 8, max_d), dtype=bool)
    for i, pat in enumerate(patterns):
        if pat is None:
            continue
        for d, dom in enumerate(pat.domains):
            n = dom.shape[0]
            rel[i, d, :n] = dom
            valid[i, d, :n] = True
    return rel, valid


def _patch_tables(patches: list[DeformedPatch]):
    max_s = max(p.sample_count for p in patches)
    u = len(patches)
    rel = np.zeros((u, max_s, 2), dtype=np.int16)
    valid = np.zeros((u, max_s), dtype=bool)
    offs = np.zeros((u, 2), dtype=np.int16)
    degen = np.zeros(u, dtype=bool)
    for i, p in enumerate(patches):
        n = p.sample_count
        rel[i, :n] = p.samples
        valid[i, :n] = True
        offs[i] = p.offset
        degen[i] = p.degenerate
    return rel, valid, offs, degen


def build_level_tables(
    img: ImageGrid,
    labels: InstanceLabelMap,
    cam: geometry.CameraModel,
    l_side: int,
    cap_distance: int,
    sigma_c: float,
    sigma_s: float,
    adaptive_cost_window: bool,
    classic_cost_window: bool,
    adaptive_propagation: bool,
) -> LevelTables:
    h, w = img.height, img.width
    p_total = h * w
    gray = np.ascontiguousarray(img.gray(), dtype=np.float64)
    lap = laplacian(img).samples

    dist = boundary_distances(labels, cap_distance)
    rows = dist.stacked().reshape(p_total, 4)
    uniq, uinv = np.unique(rows, axis=0, return_inverse=True)
    uinv = uinv.astype(np.int32)

    # --- matching windows -------------------------------------------------
    if classic_cost_window:
        patches = None
        rel = CLASSIC_OFFSETS[None, :, :].astype(np.int16)
        valid_u = np.ones((1, CLASSIC_OFFSETS.shape[0]), dtype=bool)
        offs = np.zeros((1, 2), dtype=np.int16)
        degen_u = np.zeros(1, dtype=bool)
        patch_idx = np.zeros(p_total, dtype=np.int32)
    elif adaptive_cost_window:
        patches = [deform_patch(tuple(row), l_side) for row in uniq]
        rel, valid_u, offs, degen_u = _patch_tables(patches)
        patch_idx = uinv
    else:
        patches = [deform_patch((l_side, l_side, l_side, l_side), l_side)]
        rel, valid_u, offs, degen_u = _patch_tables(patches)
        patch_idx = np.zeros(p_total, dtype=np.int32)

    xs, ys = np.meshgrid(np.arange(w, dtype=np.int32), np.arange(h, dtype=np.int32))
    px = xs.ravel()
    py = ys.ravel()
    samp_x = px[:, None] + rel[patch_idx, :, 0].astype(np.int32)
    samp_y = py[:, None] + rel[patch_idx, :, 1].astype(np.int32)
    samp_valid = (
        valid_u[patch_idx]
        & (samp_x >= 0)
        & (samp_x < w)
        & (samp_y >= 0)
        & (samp_y < h)
    )
    samp_x = np.clip(samp_x, 0, w - 1)
    samp_y = np.clip(samp_y, 0, h - 1)
    refvals = gray[samp_y, samp_x]

    ax = np.clip(px + offs[patch_idx, 0], 0, w - 1)
    ay = np.clip(py + offs[patch_idx, 1], 0, h - 1)
    anchor = gray[ay, ax]
    d_rel = rel.astype(np.float64) - offs[:, None, :].astype(np.float64)
    dist_norm = np.linalg.norm(d_rel, axis=-1)  # (U, S)
    weights = np.exp(
        -np.abs(refvals - anchor[:, None]) / sigma_c - dist_norm[patch_idx] / sigma_s
    )
    weights = np.where(samp_valid, weights, 0.0)

    degenerate = degen_u[patch_idx]

    # --- propagation domains ----------------------------------------------
    zero_rows = rows.sum(axis=1) == 0
    if adaptive_propagation:
        pats: list[PropagationPattern | None] = []
        for row in uniq:
            if row.sum() == 0:
                pats.append(None)  # 1x1 instances propagate nothing
                continue
            patch = deform_patch(tuple(row), l_side)
            pats.append(propagation_pattern(tuple(row), patch.l_h, patch.l_v))
        pat_rel, pat_valid = _pattern_tables(pats)
        pat_index = uinv.copy()
    else:
        sym = deform_patch((l_side, l_side, l_side, l_side), l_side)
        pats = [
            propagation_pattern((l_side, l_side, l_side, l_side), sym.l_h, sym.l_v),
            None,
        ]
        pat_rel, pat_valid = _pattern_tables(pats)
        pat_index = np.where(zero_rows, np.int32(1), np.int32(0))

    rays = geometry.pixel_ray(cam.K, np.stack([px, py], axis=-1).astype(np.float64))

    return LevelTables(
        width=w,
        height=h,
        cam=cam,
        gray=gray,
        lap=np.ascontiguousarray(lap, dtype=np.float64),
        labels=labels,
        dist_rows=rows,
        samp_x=samp_x.astype(np.int32),
        samp_y=samp_y.astype(np.int32),
        samp_xf=samp_x.astype(np.float64),
        samp_yf=samp_y.astype(np.float64),
        samp_valid=samp_valid,
        weights=weights,
        refvals=refvals,
        degenerate=degenerate,
        pat_index=pat_index.astype(np.int32),
        pat_rel=pat_rel,
        pat_valid=pat_valid,
        rays=rays.reshape(p_total, 3),
    )


def _level_flat_map(w_l, h_l, w_m, h_m, delta: int) -> np.ndarray:
    """Flat indices at level m for every pixel of level l (l + delta = m)."""
    xs, ys = np.meshgrid(np.arange(w_l, dtype=np.int64), np.arange(h_l, dtype=np.int64))
    if delta >= 0:
        xm = np.minimum(xs >> delta, w_m - 1)
        ym = np.minimum(ys >> delta, h_m - 1)
    else:
        up = -delta
        xm = np.minimum(xs * (1 << up) + (1 << (up - 1)), w_m - 1)
        ym = np.minimum(ys * (1 << up) + (1 << (up - 1)), h_m - 1)
    return (ym * w_m + xm).ravel().astype(np.int32)


def build_context(views: list[ViewRuntime], depth_range, cfg) -> EngineContext:
    """Cross-view matrices and level index maps for a set of view runtimes."""
    n_levels = len(views[0].tables)
    pair_a: dict = {}
    pair_b: dict = {}
    kinv: dict = {}
    level_map: dict = {}
    for r, ref in enumerate(views):
        kinv[r] = [np.linalg.inv(ref.cams[m].K) for m in range(n_levels)]
        level_map[r] = {}
        for l in range(n_levels):
            for m in range(n_levels):
                t_l, t_m = ref.tables[l], ref.tables[m]
                level_map[r][(l, m)] = _level_flat_map(
                    t_l.width, t_l.height, t_m.width, t_m.height, m - l
                )
        pair_a[r] = {}
        pair_b[r] = {}
        for s, src in enumerate(views):
            if s == r:
                continue
            r_rel, t_rel = geometry.relative_motion(ref.cams[0], src.cams[0])
            pair_a[r][s] = []
            pair_b[r][s] = []
            for m in range(n_levels):
                k_s = src.cams[m].K
                k_r_inv = np.linalg.inv(ref.cams[m].K)
                pair_a[r][s].append(k_s @ r_rel @ k_r_inv)
                pair_b[r][s].append(k_s @ t_rel)
    return EngineContext(
        views=views,
        depth_range=depth_range,
        level_count=n_levels,
        pair_a=pair_a,
        pair_b=pair_b,
        kinv=kinv,
        level_map=level_map,
        cfg_top_m=cfg.top_m,
        cfg_min_samples=cfg.min_samples,
        cfg_tau=cfg.tau,
        cfg_tau_rp=cfg.tau_rp,
        cfg_pc_literal=cfg.pc_mode == "literal",
        cfg_multi_scale_cost=cfg.multi_scale_cost,
        cfg_multi_scale_prop=cfg.multi_scale_propagation,
        cfg_threads=cfg.threads,
    )


def _bilinear(gray: np.ndarray, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    """Bilinear samples at fractional coordinates (clamped-edge outside).

    Flat gathers on a contiguous image beat 2-D fancy indexing by about 2x
    on this kernel, which dominates the evaluation profile.
    """
    h, w = gray.shape[:2]
    x0 = np.clip(np.floor(qx).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(qy).astype(np.int64), 0, max(h - 2, 0))
    fx = qx - x0
    fy = qy - y0
    base = y0 * w
    base += x0
    if gray.ndim == 2:
        flat = gray.reshape(-1)
    else:
        flat = gray.reshape(-1, gray.shape[-1])
        fx, fy = fx[..., None], fy[..., None]
    v00 = flat[base]
    v01 = flat[base + 1]
    v10 = flat[base + w]
    v11 = flat[base + w + 1]
    top = v01 - v00
    top *= fx
    top += v00
    bot = v11 - v10
    bot *= fx
    bot += v10
    bot -= top
    bot *= fy
    bot += top
    return bot


def _warp_points(a, b, mv, sx, sy):
    """Plane-induced map of reference points; returns (qx, qy, positive_z).

    The per-pixel plane folds into one homography per row, H_i = A + b mv_i^T,
    so every output channel is two fused multiply rows plus a constant.
    """
    h0 = b[0] * mv  # (M, 3): row 0 of H_i
    h0 += a[0]
    h1 = b[1] * mv
    h1 += a[1]
    h2 = b[2] * mv
    h2 += a[2]

    def apply(hrow):
        out = hrow[:, 0:1] * sx
        tmp = hrow[:, 1:2] * sy
        out += tmp
        out += hrow[:, 2:3]
        return out

    qx = apply(h0)
    qy = apply(h1)
    qz = apply(h2)
    posz = qz > _EPS_Z
    np.copyto(qz, 1.0, where=~posz)
    qx /= qz
    qy /= qz
    return qx, qy, posz


def evaluate_hypotheses(
    ctx: EngineContext,
    ref_id: int,
    level: int,
    pix: np.ndarray,
    depth: np.ndarray,
    normal: np.ndarray,
    weights3: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated cost and stored components for a batch of hypotheses.

    Args:
        pix: (M,) flat pixel indices at ``level`` of the reference view.
        depth/normal: (M,) and (M, 3) candidate planes anchored at ``pix``.
        weights3: (w_ms, w_rp, w_pc) used for the per-source aggregation.

    Returns:
        (cost (M,), comps (M, 3)) where comps rows are the mean component
        values over the selected best sources, so that
        ``weights3 @ comps[i] == cost[i]``.
    """
    m_count = int(pix.shape[0])
    out_cost = np.empty(m_count, dtype=np.float64)
    out_comps = np.empty((m_count, 3), dtype=np.float64)

    def work(start: int, stop: int) -> None:
        _evaluate_span(
            ctx,
            ref_id,
            level,
            pix[start:stop],
            depth[start:stop],
            normal[start:stop],
            weights3,
            out_cost[start:stop],
            out_comps[start:stop],
        )

    run_chunked(work, m_count, ctx.cfg_threads)
    return out_cost, out_comps


def _evaluate_span(
    ctx: EngineContext,
    ref_id: int,
    level: int,
    pix: np.ndarray,
    depth: np.ndarray,
    normal: np.ndarray,
    weights3: np.ndarray,
    out_cost: np.ndarray,
    out_comps: np.ndarray,
) -> None:
    ref = ctx.views[ref_id]
    tab_l = ref.tables[level]
    m = pix.shape[0]
    tau, tau_rp = ctx.cfg_tau, ctx.cfg_tau_rp

    rays = tab_l.rays[pix]
    ndotr = np.einsum("ij,ij->i", normal, rays)
    zeta = depth * ndotr
    ok = (depth > 0.0) & (np.abs(zeta) > _EPS_ZETA) & (ndotr < 0.0)
    zeta_safe = np.where(ok, zeta, 1.0)

    cx = (pix % tab_l.width).astype(np.float64)
    cy = (pix // tab_l.width).astype(np.float64)

    levels_ms = range(ctx.level_count) if ctx.cfg_multi_scale_cost else (level,)
    src_ids = [s for s in range(len(ctx.views)) if s != ref_id]
    n_src = len(src_ids)
    cag = np.empty((n_src, m), dtype=np.float64)
    comp = np.empty((n_src, m, 3), dtype=np.float64)

    lap_ref_p = tab_l.lap.reshape(-1, tab_l.lap.shape[-1])[pix]

    # Reference-side window data does not depend on the source view; gather
    # it once per pyramid level instead of once per (source, level).
    lev_data = []
    mv_l = None
    for lev in levels_ms:
        tab_m = ref.tables[lev]
        pm = ctx.level_map[ref_id][(level, lev)][pix]
        mv = (normal @ ctx.kinv[ref_id][lev]) / zeta_safe[:, None]
        if lev == level:
            mv_l = mv
        sval = tab_m.samp_valid[pm]
        lev_data.append(
            (
                lev,
                tab_m.samp_xf[pm],
                tab_m.samp_yf[pm],
                sval,
                tab_m.weights[pm],
                tab_m.refvals[pm],
                mv,
                sval.sum(axis=1),
            )
        )

    for si, s in enumerate(src_ids):
        src = ctx.views[s]

        # ---- multi-scale matching cost ----------------------------------
        ms_sum = np.zeros(m)
        ms_cnt = np.zeros(m, dtype=np.int64)
        for lev, sx, sy, sval, w_bil, rv, mv, total in lev_data:
            stab_m = src.tables[lev]
            qx, qy, posz = _warp_points(
                ctx.pair_a[ref_id][s][lev], ctx.pair_b[ref_id][s][lev], mv, sx, sy
            )
            inside = qx >= 0.0
            inside &= qx <= stab_m.width - 1.0
            inside &= qy >= 0.0
            inside &= qy <= stab_m.height - 1.0
            inside &= posz
            inside &= sval
            valid = inside.sum(axis=1)

            sv = _bilinear(stab_m.gray, qx, qy)
            w_eff = w_bil * inside
            sw = w_eff.sum(axis=1)
            sw_safe = np.where(sw > 0.0, sw, 1.0)
            mr = np.einsum("ij,ij->i", w_eff, rv) / sw_safe
            msv = np.einsum("ij,ij->i", w_eff, sv) / sw_safe
            var_r = np.einsum("ij,ij,ij->i", w_eff, rv, rv) / sw_safe - mr * mr
            var_s = np.einsum("ij,ij,ij->i", w_eff, sv, sv) / sw_safe - msv * msv
            cov = np.einsum("ij,ij,ij->i", w_eff, rv, sv) / sw_safe - mr * msv
            denom = np.sqrt(np.maximum(var_r * var_s, 1e-300))
            rho = np.clip(cov / denom, -1.0, 1.0)
            cost_lm = 1.0 - rho

            good = (
                ok
                & (valid >= ctx.cfg_min_samples)
                & ((total - valid) * 2 <= total)
                & (var_r >= VARIANCE_FLOOR)
                & (var_s >= VARIANCE_FLOOR)
                & (sw > 0.0)
            )
            ms_sum += np.where(good, cost_lm, 0.0)
            ms_cnt += good

        c_ms = np.where(ms_cnt > 0, ms_sum / np.maximum(ms_cnt, 1), SENTINEL_COST)

        # ---- center landing point at the home level ----------------------
        stab_l = src.tables[level]
        qx, qy, posz = _warp_points(
            ctx.pair_a[ref_id][s][level],
            ctx.pair_b[ref_id][s][level],
            mv_l,
            cx[:, None],
            cy[:, None],
        )
        qx, qy, posz = qx[:, 0], qy[:, 0], posz[:, 0]
        landed = (
            ok
            & posz
            & (qx >= 0.0)
            & (qx <= stab_l.width - 1.0)
            & (qy >= 0.0)
            & (qy <= stab_l.height - 1.0)
        )

        # ---- reprojection error ------------------------------------------
        c_rp = np.full(m, tau_rp)
        if src.estimated:
            dmap = src.depth[level]
            x0 = np.clip(np.floor(qx).astype(np.int64), 0, max(stab_l.width - 2, 0))
            y0 = np.clip(np.floor(qy).astype(np.int64), 0, max(stab_l.height - 2, 0))
            x1 = np.minimum(x0 + 1, stab_l.width - 1)
            y1 = np.minimum(y0 + 1, stab_l.height - 1)
            taps = np.stack(
                [dmap[y0, x0], dmap[y0, x1], dmap[y1, x0], dmap[y1, x1]], axis=0
            )
            taps_ok = landed & np.all(np.isfinite(taps), axis=0) & np.all(taps > 0, axis=0)
            fx = qx - x0
            fy = qy - y0
            d_src = (
                taps[0] * (1 - fx) * (1 - fy)
                + taps[1] * fx * (1 - fy)
                + taps[2] * (1 - fx) * fy
                + taps[3] * fx * fy
            )
            # lift to world through the source camera, then project back
            s_cam = src.cams[level]
            r_cam = ref.cams[level]
            qh = np.stack([qx, qy, np.ones_like(qx)], axis=-1)
            x_cam_s = (qh @ ctx.kinv[s][level].T) * d_src[:, None]
            x_world = x_cam_s @ s_cam.R + s_cam.C
            x_cam_r = (x_world - r_cam.C) @ r_cam.R.T
            z_back = x_cam_r[:, 2]
            z_ok = taps_ok & (z_back > _EPS_Z)
            z_safe = np.where(z_ok, z_back, 1.0)
            pb = (x_cam_r @ r_cam.K.T) / z_safe[:, None]
            err = np.hypot(pb[:, 0] - cx, pb[:, 1] - cy) * float(2**level)
            c_rp = np.where(z_ok, np.minimum(err, tau_rp), tau_rp)

        # ---- projection color gradient error ------------------------------
        g_src = _bilinear(stab_l.lap, np.where(landed, qx, 0.0), np.where(landed, qy, 0.0))
        diff = np.linalg.norm(g_src - lap_ref_p, axis=-1)
        if ctx.cfg_pc_literal:
            c_pc = np.where(landed, np.maximum(diff, tau), tau)
        else:
            c_pc = np.where(landed, np.minimum(diff, tau), tau)

        cag[si] = weights3[0] * c_ms + weights3[1] * c_rp + weights3[2] * c_pc
        comp[si, :, 0] = c_ms
        comp[si, :, 1] = c_rp
        comp[si, :, 2] = c_pc

    # ---- best-source aggregation ------------------------------------------
    take = min(ctx.cfg_top_m, n_src)
    order = np.argsort(cag, axis=0, kind="stable")[:take]
    sel_cost = np.take_along_axis(cag, order, axis=0).mean(axis=0)
    sel_comp = np.take_along_axis(comp, order[..., None], axis=0).mean(axis=0)
    out_cost[:] = sel_cost
    out_comps[:] = sel_comp


def reanchor(
    ctx: EngineContext,
    ref_id: int,
    level: int,
    pix: np.ndarray,
    src_level: np.ndarray,
    src_flat: np.ndarray,
    valid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Transport hypotheses from (src_level, src_flat) onto (level, pix).

    The plane is kept fixed in space: the depth along the target pixel's ray
    is the plane offset divided by the ray-normal product. Back-facing or
    out-of-range transports are flagged invalid.
    """
    ref = ctx.views[ref_id]
    m = pix.shape[0]
    depth_out = np.zeros(m)
    normal_out = np.zeros((m, 3))
    ok = valid.copy()
    rays_p = ref.tables[level].rays[pix]
    for lev in range(ctx.level_count):
        sel = valid & (src_level == lev)
        if not np.any(sel):
            continue
        flat = src_flat[sel]
        d_q = ref.depth[lev].ravel()[flat]
        n_q = ref.normal[lev].reshape(-1, 3)[flat]
        r_q = ref.tables[lev].rays[flat]
        offset = d_q * np.einsum("ij,ij->i", n_q, r_q)
        ndotp = np.einsum("ij,ij->i", n_q, rays_p[sel])
        good = ndotp < -1e-12
        d_p = np.where(good, offset / np.where(good, ndotp, 1.0), 0.0)
        d_p = np.clip(d_p, ctx.depth_range[0], ctx.depth_range[1])
        depth_out[sel] = d_p
        normal_out[sel] = n_q
        rows = np.flatnonzero(sel)
        ok[rows[~good]] = False
    return depth_out, normal_out, ok
