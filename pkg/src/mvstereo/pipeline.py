"""End-to-end depth estimation: init, iterative sweeps, weight updates, fusion.

The outer loop is iteration-major: every view is initialized once, then each
outer iteration runs one full expectation step (propagation + refinement over
all levels, coarse to fine) per view followed by that view's weight update.
Each expectation step starts by re-evaluating the incumbent hypotheses so the
stored costs stay comparable under the current weights and the other views'
freshly updated depth maps; sweeps themselves never increase a committed
cost.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import geometry
from ._engine import (
    EngineContext,
    ViewRuntime,
    build_context,
    build_level_tables,
    evaluate_hypotheses,
)
from .emopt import AnchorSet, collect_anchor_costs, detect_anchors, load_match_file, update_weights
from .errors import TooFewAnchorsError
from .imaging import build_pyramid
from .ioformats import LoadedScene, RunConfig, SceneManifest, load_label_map
from .propagation import checkerboard_schedule, run_sweep
from .segmentation import InstanceLabelMap, downsample_labels, fallback_segment

logger = logging.getLogger(__name__)

# RNG stream ids: every (view, level, iteration, phase) tuple owns one stream
# and draws whole per-pixel arrays up front, so worker count cannot reorder
# consumption.
PHASE_INIT = 0
PHASE_FRAME = 1
PHASE_REFINE_EVEN = 2
PHASE_REFINE_ODD = 3

_TWO_PI = 2.0 * math.pi


def _stream(seed: int, view: int, level: int, iteration: int, phase: int):
    return np.random.default_rng(
        np.random.SeedSequence((seed, view, level, iteration, phase))
    )


@dataclass
class ViewState:
    """One reference view's optimization state.

    The runtime carries the per-level hypothesis/cost/component maps, label
    maps, boundary distances, and the cached deformed windows and
    propagation domains; the tangent-frame maps steer the next refinement
    step.
    """

    runtime: ViewRuntime
    seed: int
    iteration: int = 0


@dataclass
class SceneState:
    """All views plus the shared evaluation context and per-view weights."""

    cfg: RunConfig
    scene: LoadedScene
    ctx: EngineContext
    views: list[ViewState]
    anchors: list[AnchorSet]
    weights: list[np.ndarray]


@dataclass(frozen=True)
class FusedPointCloud:
    """Consistency-filtered surface points with world normals and colors.

    ``merged`` records, per view, which pixels were folded into some emitted
    point (as the emitting reference or as a consumed, agreeing source);
    evaluation code uses it to measure surface coverage.
    """

    points: np.ndarray  # (n, 3) float64
    normals: np.ndarray  # (n, 3) float64
    colors: np.ndarray  # (n, 3) uint8
    merged: tuple = ()  # per-view (h, w) bool masks

    def __len__(self) -> int:
        return int(self.points.shape[0])


def _view_labels(scene: LoadedScene, idx: int) -> InstanceLabelMap:
    path = scene.manifest.label_paths[idx]
    img = scene.images[idx]
    if path is None:
        logger.info("view %d: no label map given, segmenting by color", idx)
        return fallback_segment(img)
    if not os.path.isabs(path):
        path = os.path.join(scene.manifest.base_dir, path)
    return load_label_map(path, img.width, img.height)


def build_state(
    scene: LoadedScene,
    cfg: RunConfig,
    labels_override: list[InstanceLabelMap] | None = None,
) -> SceneState:
    """Pyramids, label maps, per-level tables, and cross-view matrices.

    ``labels_override`` supplies one full-resolution label map per view and
    skips both the manifest label paths and the fallback segmenter; callers
    that already hold label maps in memory (synthetic scenes, tests) use it
    to avoid a disk round trip.
    """
    views: list[ViewState] = []
    for idx in range(scene.view_count):
        img = scene.images[idx]
        pyr = build_pyramid(img, cfg.k)
        cams = [
            scene.cameras[idx].at_level(lvl, g.width, g.height)
            for lvl, g in enumerate(pyr.levels)
        ]
        if labels_override is not None:
            labels = [labels_override[idx]]
        else:
            labels = [_view_labels(scene, idx)]
        for g in pyr.levels[1:]:
            labels.append(downsample_labels(labels[-1], g.width, g.height))
        tables = [
            build_level_tables(
                pyr.levels[lvl],
                labels[lvl],
                cams[lvl],
                cfg.l_side,
                cfg.effective_cap_distance,
                cfg.sigma_c,
                cfg.effective_sigma_s,
                cfg.adaptive_cost_window,
                cfg.classic_cost_window,
                cfg.adaptive_propagation,
            )
            for lvl in range(pyr.level_count)
        ]
        shapes = [(g.height, g.width) for g in pyr.levels]
        runtime = ViewRuntime(
            view_id=idx,
            pyramid=pyr,
            cams=cams,
            tables=tables,
            depth=[np.zeros(s) for s in shapes],
            normal=[np.zeros(s + (3,)) for s in shapes],
            cost=[np.zeros(s) for s in shapes],
            comps=[np.zeros(s + (3,)) for s in shapes],
            e1=[np.zeros(s + (3,)) for s in shapes],
            e2=[np.zeros(s + (3,)) for s in shapes],
        )
        views.append(ViewState(runtime=runtime, seed=cfg.seed))
        logger.info(
            "view %d: %dx%d, %d levels, %d instances",
            idx,
            img.width,
            img.height,
            pyr.level_count,
            int(labels[0].labels.max()),
        )

    ctx = build_context([v.runtime for v in views], scene.manifest.depth_range, cfg)
    anchors = _scene_anchors(scene, cfg)
    weights = [np.array([cfg.w_ms, cfg.w_rp, cfg.w_pc]) for _ in views]
    return SceneState(
        cfg=cfg, scene=scene, ctx=ctx, views=views, anchors=anchors, weights=weights
    )


def state_from_synth(synth, cfg: RunConfig) -> SceneState:
    """Scene state straight from a generated synthetic scene.

    Skips the disk round trip (and the 8-bit image quantization that comes
    with it): images and ground-truth label maps are used as generated.
    """
    n = len(synth.images)
    manifest = SceneManifest(
        image_paths=tuple(f"<memory:{i}>" for i in range(n)),
        cameras=tuple(synth.cameras),
        label_paths=(None,) * n,
        depth_range=synth.depth_range,
        output_dir=".",
    )
    scene = LoadedScene(manifest=manifest, images=tuple(synth.images))
    return build_state(scene, cfg, labels_override=list(synth.gt_labels))


def _scene_anchors(scene: LoadedScene, cfg: RunConfig) -> list[AnchorSet]:
    """Per-view anchor correspondences for the weight updates.

    A match file in the manifest supplies the first view's anchors (its
    format carries no reference-view column); every other view falls back to
    built-in corner matching.
    """
    empty = AnchorSet(
        src_view=np.zeros(0, dtype=np.int32),
        ref_xy=np.zeros((0, 2)),
        src_xy=np.zeros((0, 2)),
    )
    if not cfg.em_enabled:
        return [empty for _ in range(scene.view_count)]
    anchors = []
    for idx in range(scene.view_count):
        if idx == 0 and scene.manifest.match_file is not None:
            path = scene.manifest.match_file
            if not os.path.isabs(path):
                path = os.path.join(scene.manifest.base_dir, path)
            anchors.append(load_match_file(path))
            continue
        src_ids = [s for s in range(scene.view_count) if s != idx]
        found = detect_anchors(scene.images[idx], [scene.images[s] for s in src_ids])
        remapped = AnchorSet(
            src_view=np.asarray(src_ids, dtype=np.int32)[found.src_view]
            if len(found)
            else found.src_view,
            ref_xy=found.ref_xy,
            src_xy=found.src_xy,
        )
        anchors.append(remapped)
        logger.info("view %d: %d anchor matches", idx, len(remapped))
    return anchors


def _random_frames(n: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of the random tangent frame: Gram-Schmidt + in-plane spin."""
    m = n.shape[0]
    axis = np.zeros((m, 3))
    axis[np.arange(m), np.argmin(np.abs(n), axis=1)] = 1.0
    e1 = axis - np.einsum("ij,ij->i", axis, n)[:, None] * n
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    r1 = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    r2 = np.cross(n, r1)
    r2 /= np.linalg.norm(r2, axis=1, keepdims=True)
    return r1, r2


def initialize_view(state: SceneState, ref_id: int) -> None:
    """Random camera-facing hypotheses plus one cost evaluation per level."""
    cfg = state.cfg
    rt = state.views[ref_id].runtime
    lo, hi = state.ctx.depth_range
    w3 = state.weights[ref_id]
    for level, tab in enumerate(rt.tables):
        p_total = tab.width * tab.height
        rng = _stream(cfg.seed, ref_id, level, 0, PHASE_INIT)
        depth = rng.uniform(lo, hi, size=p_total)
        z = rng.uniform(-1.0, 1.0, size=p_total)
        phi = rng.uniform(0.0, _TWO_PI, size=p_total)
        sin_t = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        normal = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), z], axis=-1)
        dots = np.einsum("ij,ij->i", normal, tab.rays)
        normal[dots > 0.0] *= -1.0
        grazing = np.abs(dots) < 1e-12
        if np.any(grazing):
            normal[grazing] = -tab.rays[grazing] / np.linalg.norm(
                tab.rays[grazing], axis=1, keepdims=True
            )

        frame_rng = _stream(cfg.seed, ref_id, level, 0, PHASE_FRAME)
        phi_f = frame_rng.uniform(0.0, _TWO_PI, size=p_total)
        e1, e2 = _random_frames(normal, phi_f)

        cost, comps = evaluate_hypotheses(
            state.ctx, ref_id, level, np.arange(p_total), depth, normal, w3
        )
        shape = (tab.height, tab.width)
        rt.depth[level] = depth.reshape(shape)
        rt.normal[level] = normal.reshape(shape + (3,))
        rt.cost[level] = cost.reshape(shape)
        rt.comps[level] = comps.reshape(shape + (3,))
        rt.e1[level] = e1.reshape(shape + (3,))
        rt.e2[level] = e2.reshape(shape + (3,))


def initialize(state: SceneState) -> None:
    for ref_id in range(len(state.views)):
        initialize_view(state, ref_id)
    logger.info("initialized %d views", len(state.views))


def refine_sweep(
    state: SceneState, ref_id: int, level: int, parity: int, iteration: int
) -> int:
    """One checkerboard refinement sweep: depth draw x normal perturbation.

    Candidates are (drawn depth, old normal), (old depth, rotated normal),
    (drawn depth, rotated normal); ties keep the incumbent, earlier
    candidates win candidate ties. Tangent frames descend along accepted
    rotations and re-randomize otherwise.

    Returns:
        Number of pixels whose hypothesis changed.
    """
    cfg = state.cfg
    ctx = state.ctx
    rt = state.views[ref_id].runtime
    tab = rt.tables[level]
    w, h = tab.width, tab.height
    p_total = w * h
    even, odd = checkerboard_schedule(w, h)
    pix = even if parity == 0 else odd
    m = pix.shape[0]
    w3 = state.weights[ref_id]
    eq9 = cfg.refinement_mode == "eq9"

    sched_i = min(max(iteration, 1), cfg.n_max)
    angle_hi = 5.0 * 2.0 ** (cfg.n_max - sched_i)
    rng = _stream(cfg.seed, ref_id, level, iteration, PHASE_REFINE_EVEN + parity)
    theta1 = rng.uniform(0.0, angle_hi, size=p_total)
    theta2 = rng.uniform(0.0, angle_hi, size=p_total)
    depth_u = rng.uniform(size=p_total)
    offsets = rng.uniform(-0.25, 0.25, size=(p_total, 3)) if eq9 else None
    phi = rng.uniform(0.0, _TWO_PI, size=p_total)

    depth0 = rt.depth[level].ravel()[pix]
    n0 = rt.normal[level].reshape(-1, 3)[pix]
    inc_cost = rt.cost[level].ravel()[pix]
    rays = tab.rays[pix]

    # pixelwise depth interval: committed depths over the deformed window
    if eq9:
        d_lo = np.full(m, ctx.depth_range[0])
        d_hi = np.full(m, ctx.depth_range[1])
    else:
        d_flat = rt.depth[level].ravel()
        svals = d_flat[tab.samp_y[pix] * w + tab.samp_x[pix]]
        svalid = tab.samp_valid[pix]
        d_lo = np.where(svalid, svals, np.inf).min(axis=1)
        d_hi = np.where(svalid, svals, -np.inf).max(axis=1)
        none_valid = ~svalid.any(axis=1)
        d_lo[none_valid] = depth0[none_valid]
        d_hi[none_valid] = depth0[none_valid]
        d_lo = np.clip(d_lo, ctx.depth_range[0], ctx.depth_range[1])
        d_hi = np.clip(d_hi, ctx.depth_range[0], ctx.depth_range[1])
    depth_draw = d_lo + depth_u[pix] * (d_hi - d_lo)

    if eq9:
        cand = n0 + offsets[pix]
        norms = np.linalg.norm(cand, axis=1)
        safe = norms >= 1e-9
        n2 = np.where(safe[:, None], cand / np.where(safe, norms, 1.0)[:, None], n0)
    else:
        e1 = rt.e1[level].reshape(-1, 3)[pix]
        e2 = rt.e2[level].reshape(-1, 3)[pix]
        t1 = np.radians(theta1[pix])[:, None]
        t2 = np.radians(theta2[pix])[:, None]
        n_mid = np.cos(t1) * n0 + np.sin(t1) * np.cross(e1, n0)
        n2 = np.cos(t2) * n_mid + np.sin(t2) * np.cross(e2, n_mid)
        if cfg.full_rodrigues:
            n2 += (1.0 - np.cos(t2)) * np.einsum("ij,ij->i", e2, n_mid)[:, None] * e2
        n2 /= np.linalg.norm(n2, axis=1, keepdims=True)
    facing = np.einsum("ij,ij->i", n2, rays) < -1e-9

    cand_depth = np.stack([depth_draw, depth0, depth_draw], axis=1)
    cand_normal = np.stack([n0, n2, n2], axis=1)
    cand_ok = np.stack([np.ones(m, dtype=bool), facing, facing], axis=1)

    costs = np.full((m, 3), np.inf)
    comps = np.zeros((m, 3, 3))
    rows = np.flatnonzero(cand_ok.ravel())
    if rows.size:
        pix_rep = np.repeat(pix, 3)[rows]
        c, cc = evaluate_hypotheses(
            ctx,
            ref_id,
            level,
            pix_rep,
            cand_depth.ravel()[rows],
            cand_normal.reshape(-1, 3)[rows],
            w3,
        )
        costs.ravel()[rows] = c
        comps.reshape(-1, 3)[rows] = cc

    table = np.concatenate([inc_cost[:, None], costs], axis=1)
    win = np.argmin(table, axis=1)
    changed = win > 0
    rot_accepted = win >= 2

    if np.any(changed):
        rows_c = np.flatnonzero(changed)
        sel = rows_c * 3 + (win[rows_c] - 1)
        tgt = pix[rows_c]
        rt.depth[level].ravel()[tgt] = cand_depth.ravel()[sel]
        rt.normal[level].reshape(-1, 3)[tgt] = cand_normal.reshape(-1, 3)[sel]
        rt.cost[level].ravel()[tgt] = costs.ravel()[sel]
        rt.comps[level].reshape(-1, 3)[tgt] = comps.reshape(-1, 3)[sel]

    if not eq9:
        n_now = rt.normal[level].reshape(-1, 3)[pix]
        rnd1, rnd2 = _random_frames(n_now, phi[pix])
        step = n2 - n0
        if not cfg.raw_descent:
            step = step - np.einsum("ij,ij->i", step, n_now)[:, None] * n_now
        nrm = np.linalg.norm(step, axis=1)
        f1 = step / np.where(nrm > 0.0, nrm, 1.0)[:, None]
        f2 = np.cross(f1, n_now)
        nrm2 = np.linalg.norm(f2, axis=1)
        f2 /= np.where(nrm2 > 0.0, nrm2, 1.0)[:, None]
        use_descend = rot_accepted & (nrm >= 1e-9) & (nrm2 >= 1e-9)
        new_e1 = np.where(use_descend[:, None], f1, rnd1)
        new_e2 = np.where(use_descend[:, None], f2, rnd2)
        rt.e1[level].reshape(-1, 3)[pix] = new_e1
        rt.e2[level].reshape(-1, 3)[pix] = new_e2

    return int(np.count_nonzero(changed))


def refresh_view(state: SceneState, ref_id: int) -> None:
    """Re-evaluate every committed hypothesis under current weights/sources."""
    rt = state.views[ref_id].runtime
    w3 = state.weights[ref_id]
    for level, tab in enumerate(rt.tables):
        p_total = tab.width * tab.height
        cost, comps = evaluate_hypotheses(
            state.ctx,
            ref_id,
            level,
            np.arange(p_total),
            rt.depth[level].ravel(),
            rt.normal[level].reshape(-1, 3),
            w3,
        )
        rt.cost[level] = cost.reshape(tab.height, tab.width)
        rt.comps[level] = comps.reshape(tab.height, tab.width, 3)


def e_step_view(state: SceneState, ref_id: int, iteration: int, observer=None) -> None:
    """One expectation step: refresh, then sweep all levels coarse to fine.

    ``observer(ref_id, level, stage, parity, before, after)`` is invoked
    after every propagation/refinement sweep with copies of the committed
    cost map, for monotonicity instrumentation.
    """
    cfg = state.cfg
    ctx = state.ctx
    rt = state.views[ref_id].runtime
    w3 = state.weights[ref_id]
    refresh_view(state, ref_id)
    for level in reversed(range(ctx.level_count)):
        for parity in (0, 1):
            before = rt.cost[level].copy() if observer else None
            moved = run_sweep(ctx, ref_id, level, parity, w3)
            if observer:
                observer(ref_id, level, "prop", parity, before, rt.cost[level].copy())
            logger.debug(
                "view %d it %d level %d prop p%d: %d updates",
                ref_id, iteration, level, parity, moved,
            )
        if cfg.refinement_enabled:
            for parity in (0, 1):
                before = rt.cost[level].copy() if observer else None
                moved = refine_sweep(state, ref_id, level, parity, iteration)
                if observer:
                    observer(
                        ref_id, level, "refine", parity, before, rt.cost[level].copy()
                    )
                logger.debug(
                    "view %d it %d level %d refine p%d: %d updates",
                    ref_id, iteration, level, parity, moved,
                )
    state.views[ref_id].iteration = iteration
    rt.estimated = True


def _mu_target(cfg: RunConfig, iteration: int) -> float:
    """Barrier weight annealed geometrically toward ``mu_final``."""
    frac = iteration / max(cfg.iterations, 1)
    return float(cfg.mu_start * (cfg.mu_final / cfg.mu_start) ** frac)


def em_update(state: SceneState, ref_id: int, iteration: int) -> bool:
    """M-step for one view from its stored component maps at the anchors."""
    cfg = state.cfg
    if not cfg.em_enabled:
        return False
    try:
        s = collect_anchor_costs(
            state.anchors[ref_id],
            state.views[ref_id].runtime.comps[0],
            cfg.min_anchors,
        )
    except TooFewAnchorsError as exc:
        logger.info("view %d: weight update skipped (%s)", ref_id, exc)
        return False
    w_new, adopted = update_weights(
        state.weights[ref_id], s, cfg.eta, _mu_target(cfg, iteration)
    )
    state.weights[ref_id] = w_new
    logger.info(
        "view %d it %d weights (%.4f, %.4f, %.4f)%s",
        ref_id, iteration, w_new[0], w_new[1], w_new[2], "" if adopted else " (kept)",
    )
    return adopted


def em_update_global(state: SceneState, iteration: int) -> bool:
    """Shared M-step over all views' anchors; applies one weight vector."""
    cfg = state.cfg
    if not cfg.em_enabled:
        return False
    total = np.zeros(3)
    used = 0
    for ref_id in range(len(state.views)):
        try:
            total += collect_anchor_costs(
                state.anchors[ref_id],
                state.views[ref_id].runtime.comps[0],
                cfg.min_anchors,
            )
            used += 1
        except TooFewAnchorsError:
            continue
    if used == 0:
        logger.info("global weight update skipped: no view has enough anchors")
        return False
    w_new, adopted = update_weights(
        state.weights[0], total, cfg.eta, _mu_target(cfg, iteration)
    )
    for ref_id in range(len(state.views)):
        state.weights[ref_id] = w_new
    logger.info(
        "global it %d weights (%.4f, %.4f, %.4f) over %d views",
        iteration, w_new[0], w_new[1], w_new[2], used,
    )
    return adopted


def run_view(state: SceneState, ref_id: int, observer=None):
    """All outer iterations for a single view against frozen sources.

    Returns:
        (depth, normal, cost) level-0 maps plus the per-iteration mean
        committed cost.
    """
    cfg = state.cfg
    rt = state.views[ref_id].runtime
    stats = []
    for iteration in range(1, cfg.iterations + 1):
        e_step_view(state, ref_id, iteration, observer)
        if cfg.em_scope == "view":
            em_update(state, ref_id, iteration)
        stats.append(float(rt.cost[0].mean()))
        logger.info("view %d iteration %d mean cost %.5f", ref_id, iteration, stats[-1])
    return rt.depth[0], rt.normal[0], rt.cost[0], tuple(stats)


def run_scene(state: SceneState, observer=None) -> SceneState:
    """Initialize everything, then iterate expectation + weight updates."""
    cfg = state.cfg
    initialize(state)
    for iteration in range(1, cfg.iterations + 1):
        for ref_id in range(len(state.views)):
            e_step_view(state, ref_id, iteration, observer)
            if cfg.em_scope == "view":
                em_update(state, ref_id, iteration)
        if cfg.em_scope == "global":
            em_update_global(state, iteration)
        mean_cost = float(
            np.mean([v.runtime.cost[0].mean() for v in state.views])
        )
        logger.info("iteration %d mean level-0 cost %.5f", iteration, mean_cost)
    return state


def fuse_maps(
    cams,
    depths,
    normals,
    images,
    consistency_min: int = 2,
    rel_depth_tol: float = 0.01,
    normal_angle_tol: float = 10.0,
) -> FusedPointCloud:
    """Consistency-vote fusion of per-view depth/normal maps.

    Every reference pixel back-projects to a world point; a source view
    agrees when the point lands on a stored depth within ``rel_depth_tol``
    (relative, measured against the transported depth) and the normals are
    within ``normal_angle_tol`` degrees. Points seen consistently by at
    least ``consistency_min`` views (the reference included) are emitted as
    the average of all agreeing surface points; agreeing source pixels are
    consumed so later reference passes skip them.
    """
    n_views = len(cams)
    consumed = [np.zeros(d.size, dtype=bool) for d in depths]
    emitted = [np.zeros(d.size, dtype=bool) for d in depths]
    out_pts, out_nrm, out_col = [], [], []

    for r in range(n_views):
        cam_r = cams[r]
        h, w = depths[r].shape
        d_r = depths[r].ravel()
        n_r = normals[r].reshape(-1, 3)
        valid = np.isfinite(d_r) & (d_r > 0.0) & ~consumed[r]

        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        rays = geometry.pixel_ray(cam_r.K, np.stack([xs.ravel(), ys.ravel()], axis=-1))
        pts_r = (rays * np.where(valid, d_r, 1.0)[:, None]) @ cam_r.R + cam_r.C
        nw_r = n_r @ cam_r.R

        sum_pts = pts_r.copy()
        sum_nrm = nw_r.copy()
        count = np.ones(d_r.size)
        agree_marks = []
        for s in range(n_views):
            if s == r:
                continue
            cam_s = cams[s]
            hs, ws = depths[s].shape
            x_cam = (pts_r - cam_s.C) @ cam_s.R.T
            z = x_cam[:, 2]
            front = z > 1e-12
            z_safe = np.where(front, z, 1.0)
            proj = x_cam @ cam_s.K.T
            px = proj[:, 0] / z_safe
            py = proj[:, 1] / z_safe
            qx = np.round(px).astype(np.int64)
            qy = np.round(py).astype(np.int64)
            inb = front & (qx >= 0) & (qx < ws) & (qy >= 0) & (qy < hs)
            flat = np.clip(qy, 0, hs - 1) * ws + np.clip(qx, 0, ws - 1)
            d_s = depths[s].ravel()[flat]
            n_s = normals[s].reshape(-1, 3)[flat]
            d_ok = np.isfinite(d_s) & (d_s > 0.0)
            rel = np.abs(z_safe - d_s) / z_safe <= rel_depth_tol
            nw_s = n_s @ cam_s.R
            cosang = np.clip(np.einsum("ij,ij->i", nw_r, nw_s), -1.0, 1.0)
            ang = np.degrees(np.arccos(cosang)) <= normal_angle_tol
            agree = valid & inb & d_ok & rel & ang

            rays_s = geometry.pixel_ray(
                cam_s.K, np.stack([qx, qy], axis=-1).astype(np.float64)
            )
            pts_s = (rays_s * np.where(d_ok, d_s, 1.0)[:, None]) @ cam_s.R + cam_s.C
            sum_pts += np.where(agree[:, None], pts_s, 0.0)
            sum_nrm += np.where(agree[:, None], nw_s, 0.0)
            count += agree
            agree_marks.append((s, flat, agree))

        emit = valid & (count >= consistency_min)
        emitted[r] = emit
        if not np.any(emit):
            continue
        avg_pts = sum_pts[emit] / count[emit][:, None]
        avg_nrm = sum_nrm[emit]
        norms = np.linalg.norm(avg_nrm, axis=1)
        bad = norms < 1e-12
        avg_nrm[bad] = nw_r[emit][bad]
        norms = np.where(bad, np.linalg.norm(avg_nrm, axis=1), norms)
        avg_nrm /= norms[:, None]

        img_arr = images[r].samples if hasattr(images[r], "samples") else np.asarray(images[r])
        if img_arr.ndim == 2:
            img_arr = img_arr[..., None]
        rgb = img_arr.reshape(-1, img_arr.shape[-1])[emit]
        if rgb.shape[1] == 1:
            rgb = np.repeat(rgb, 3, axis=1)
        out_pts.append(avg_pts)
        out_nrm.append(avg_nrm)
        out_col.append(np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8))

        for s, flat, agree in agree_marks:
            consumed[s][flat[emit & agree]] = True
        logger.info("view %d fused %d points", r, int(emit.sum()))

    merged = tuple(
        (consumed[v] | emitted[v]).reshape(depths[v].shape) for v in range(n_views)
    )
    if not out_pts:
        return FusedPointCloud(
            points=np.zeros((0, 3)), normals=np.zeros((0, 3)),
            colors=np.zeros((0, 3), dtype=np.uint8), merged=merged,
        )
    return FusedPointCloud(
        points=np.concatenate(out_pts, axis=0),
        normals=np.concatenate(out_nrm, axis=0),
        colors=np.concatenate(out_col, axis=0),
        merged=merged,
    )


def fuse(state: SceneState) -> FusedPointCloud:
    """Fuse the scene state's level-0 maps into a point cloud."""
    cfg = state.cfg
    return fuse_maps(
        [v.runtime.cams[0] for v in state.views],
        [v.runtime.depth[0] for v in state.views],
        [v.runtime.normal[0] for v in state.views],
        list(state.scene.images),
        consistency_min=cfg.consistency_min,
        rel_depth_tol=cfg.rel_depth_tol,
        normal_angle_tol=cfg.normal_angle_tol,
    )
