"""Cost-weight optimization over feature-anchored pixels.

The weight subproblem is linear in the weights over the constrained simplex
{sum w = 1, w >= eta}, so its exact minimum sits on a vertex. Two solvers are
kept side by side: the interior-point route (log-barrier Newton on the
2-variable reduced problem) used by the pipeline with an annealed barrier,
and the exhaustive vertex enumeration used as its cross-check and as the
barrier's limit oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateSumsError, TooFewAnchorsError
from .imaging import ImageGrid

logger = logging.getLogger(__name__)

MIN_ANCHORS = 50


@dataclass(frozen=True)
class AnchorSet:
    """Sparse cross-view correspondences that supervise the weight update."""

    src_view: np.ndarray  # (n,) int32 source view ids
    ref_xy: np.ndarray  # (n, 2) float64 pixel in the reference
    src_xy: np.ndarray  # (n, 2) float64 matched pixel in the source

    def __len__(self) -> int:
        return int(self.src_view.shape[0])


def m_step_vertex(s: np.ndarray, eta: float) -> np.ndarray:
    """Exact minimizer of w.s over {sum w = 1, w >= eta} by vertex scan."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DegenerateSumsError("anchor cost sums must be finite")
    if not 0.0 < eta < 1.0 / 3.0:
        raise ValueError("eta must lie in (0, 1/3)")
    best, best_val = None, np.inf
    for i in range(3):
        w = np.full(3, eta)
        w[i] = 1.0 - 2.0 * eta
        val = float(w @ s)
        if val < best_val:
            best, best_val = w, val
    return best


def m_step(
    s: np.ndarray,
    eta: float,
    mu_target: float = 1e-3,
    mu_start: float = 1e-1,
) -> np.ndarray:
    """Barrier-Newton minimizer of w.s over {sum w = 1, w >= eta}.

    Eliminates w3 = 1 - w1 - w2 and minimizes
    f(w1, w2) = s.w - mu * sum_i log(w_i - eta)
    by damped Newton steps with continuation mu_start -> mu_target
    (factor 10 per stage, warm-started). The Hessian is diagonal-plus-rank-one
    and positive definite everywhere in the interior.

    Returns weights with sum exactly closed to 1 and every component >= eta
    within 1e-9 (interior for any positive mu).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (3,) or not np.all(np.isfinite(s)):
        raise DegenerateSumsError("anchor cost sums must be finite 3-vectors")
    if not 0.0 < eta < 1.0 / 3.0:
        raise ValueError("eta must lie in (0, 1/3)")
    if mu_target <= 0.0 or mu_start <= 0.0:
        raise ValueError("barrier weights must be positive")

    c1, c2 = s[0] - s[2], s[1] - s[2]
    x = np.array([1.0 / 3.0, 1.0 / 3.0])

    def slacks(xv: np.ndarray) -> tuple[float, float, float]:
        return xv[0] - eta, xv[1] - eta, 1.0 - xv[0] - xv[1] - eta

    def value(xv: np.ndarray, mu: float) -> float:
        a, b, c = slacks(xv)
        return float(c1 * xv[0] + c2 * xv[1] - mu * (np.log(a) + np.log(b) + np.log(c)))

    mus: list[float] = []
    mu = mu_start
    while mu > mu_target * (1.0 + 1e-12):
        mus.append(mu)
        mu /= 10.0
    mus.append(mu_target)

    for mu in mus:
        for _ in range(200):
            a, b, c = slacks(x)
            g = np.array([c1 - mu / a + mu / c, c2 - mu / b + mu / c])
            haa = mu / a**2 + mu / c**2
            hbb = mu / b**2 + mu / c**2
            hab = mu / c**2
            det = haa * hbb - hab * hab
            step = np.array([(hbb * g[0] - hab * g[1]), (haa * g[1] - hab * g[0])]) / det
            decrement = float(g @ step)
            if decrement / 2.0 < 1e-10:
                break
            t = 1.0
            f0 = value(x, mu)
            while t > 1e-12:
                cand = x - t * step
                sa, sb, sc = slacks(cand)
                if min(sa, sb, sc) > 0.0 and value(cand, mu) < f0 - 1e-4 * t * decrement:
                    break
                t /= 2.0
            x = x - t * step

    w = np.array([x[0], x[1], 1.0 - x[0] - x[1]])
    return w


def collect_anchor_costs(
    anchors: AnchorSet,
    component_maps: np.ndarray,
    min_anchors: int = MIN_ANCHORS,
    sentinel_ms: float = 2.0,
) -> np.ndarray:
    """Component-wise sums of stored costs at the anchor pixels.

    Args:
        component_maps: (h, w, 3) stored (c_ms, c_rp, c_pc) of the reference
            view under its current committed hypotheses.

    Anchors whose matching cost sits at the sentinel (or is non-finite) are
    dropped with their whole row.

    Raises:
        TooFewAnchorsError: when fewer than ``min_anchors`` usable anchors
            remain; callers skip the weight update for this view.
    """
    h, w = component_maps.shape[:2]
    if len(anchors) == 0:
        raise TooFewAnchorsError("no anchors available")
    xs = np.clip(np.round(anchors.ref_xy[:, 0]).astype(np.int64), 0, w - 1)
    ys = np.clip(np.round(anchors.ref_xy[:, 1]).astype(np.int64), 0, h - 1)
    comps = component_maps[ys, xs, :]
    good = np.all(np.isfinite(comps), axis=1) & (comps[:, 0] < sentinel_ms)
    if int(good.sum()) < min_anchors:
        raise TooFewAnchorsError(
            f"{int(good.sum())} usable anchors < required {min_anchors}"
        )
    return comps[good].sum(axis=0)


def _harris_corners(
    gray: np.ndarray,
    max_corners: int,
    margin: int,
    k: float = 0.06,
    rel_threshold: float = 0.01,
) -> np.ndarray:
    """(n, 2) integer corner coordinates (x, y), strongest first."""
    g = gray.astype(np.float64)
    iy, ix = np.gradient(g)
    sxx = ndimage.gaussian_filter(ix * ix, 1.5)
    syy = ndimage.gaussian_filter(iy * iy, 1.5)
    sxy = ndimage.gaussian_filter(ix * iy, 1.5)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    resp = det - k * trace * trace
    localmax = resp == ndimage.maximum_filter(resp, size=5)
    strong = resp > rel_threshold * max(float(resp.max()), 1e-12)
    mask = localmax & strong
    mask[:margin, :] = False
    mask[-margin:, :] = False
    mask[:, :margin] = False
    mask[:, -margin:] = False
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.argsort(resp[ys, xs])[::-1][:max_corners]
    return np.stack([xs[order], ys[order]], axis=-1)


def _descriptors(gray: np.ndarray, corners: np.ndarray, radius: int = 4) -> np.ndarray:
    """Zero-mean, unit-norm flattened patches around each corner."""
    out = np.empty((corners.shape[0], (2 * radius + 1) ** 2), dtype=np.float64)
    for i, (x, y) in enumerate(corners):
        patch = gray[y - radius : y + radius + 1, x - radius : x + radius + 1].astype(
            np.float64
        )
        vec = patch.ravel()
        vec = vec - vec.mean()
        norm = np.linalg.norm(vec)
        out[i] = vec / norm if norm > 1e-12 else vec
    return out


def detect_anchors(
    ref_img: ImageGrid,
    src_imgs,
    max_corners: int = 300,
    ratio: float = 0.9,
) -> AnchorSet:
    """Corner matches between the reference and each source image.

    Harris corners with normalized-patch descriptors, nearest-neighbor
    matching with a distance-ratio test and a mutual-best check. An empty
    result is legal and simply disables the weight update downstream.
    """
    margin = 4
    ref_gray = ref_img.gray()
    ref_pts = _harris_corners(ref_gray, max_corners, margin)
    views, refs, srcs = [], [], []
    if ref_pts.shape[0] > 0:
        ref_desc = _descriptors(ref_gray, ref_pts)
        for view_id, src in enumerate(src_imgs):
            src_gray = src.gray()
            src_pts = _harris_corners(src_gray, max_corners, margin)
            if src_pts.shape[0] == 0:
                continue
            src_desc = _descriptors(src_gray, src_pts)
            # Descriptors are unit vectors: squared distance = 2 - 2 rho.
            dist = 2.0 - 2.0 * (ref_desc @ src_desc.T)
            fwd = np.argmin(dist, axis=1)
            bwd = np.argmin(dist, axis=0)
            for i, j in enumerate(fwd):
                if bwd[j] != i:
                    continue
                row = dist[i]
                best = row[j]
                row = np.delete(row, j)
                second = row.min() if row.size else np.inf
                if best > ratio * second:
                    continue
                views.append(view_id)
                refs.append(ref_pts[i])
                srcs.append(src_pts[j])
    if not views:
        return AnchorSet(
            src_view=np.zeros(0, dtype=np.int32),
            ref_xy=np.zeros((0, 2), dtype=np.float64),
            src_xy=np.zeros((0, 2), dtype=np.float64),
        )
    return AnchorSet(
        src_view=np.asarray(views, dtype=np.int32),
        ref_xy=np.asarray(refs, dtype=np.float64),
        src_xy=np.asarray(srcs, dtype=np.float64),
    )


def load_match_file(path) -> AnchorSet:
    """Parse `src_view_id x_ref y_ref x_src y_src` lines into an AnchorSet."""
    views, refs, srcs = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                from .errors import ParseError

                raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            views.append(int(parts[0]))
            refs.append((float(parts[1]), float(parts[2])))
            srcs.append((float(parts[3]), float(parts[4])))
    return AnchorSet(
        src_view=np.asarray(views, dtype=np.int32),
        ref_xy=np.asarray(refs, dtype=np.float64).reshape(-1, 2),
        src_xy=np.asarray(srcs, dtype=np.float64).reshape(-1, 2),
    )


def save_match_file(path, anchors: AnchorSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v, (rx, ry), (sx, sy) in zip(
            anchors.src_view, anchors.ref_xy, anchors.src_xy
        ):
            fh.write(f"{int(v)} {rx:.3f} {ry:.3f} {sx:.3f} {sy:.3f}\n")


def update_weights(
    incumbent: np.ndarray,
    s: np.ndarray,
    eta: float,
    mu_target: float,
) -> tuple[np.ndarray, bool]:
    """One M-step with the accept-only-improving guard.

    The guard compares objectives only when the incumbent itself is feasible
    (the initial weights are not on the constrained simplex, so the first
    update always adopts the solver output).

    Returns (weights, adopted).
    """
    incumbent = np.asarray(incumbent, dtype=np.float64)
    w_new = m_step(s, eta, mu_target=mu_target)
    feasible = (
        abs(float(incumbent.sum()) - 1.0) <= 1e-9 and float(incumbent.min()) >= eta - 1e-9
    )
    if feasible and float(w_new @ s) > float(incumbent @ s):
        logger.debug("m-step rejected: objective would not improve")
        return incumbent, False
    return w_new, True
