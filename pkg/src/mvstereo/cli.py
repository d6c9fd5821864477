"""Command-line entry points for the stereo engine.

Subcommands:

* ``estimate`` -- run depth/normal estimation for a scene (or one view).
* ``fuse``     -- merge per-view depth maps into a PLY point cloud.
* ``synth``    -- render a synthetic benchmark scene to disk.
* ``eval``     -- compare estimated depth maps against ground truth.
* ``segment``  -- produce label maps with the built-in color segmenter.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors (missing or
malformed files, bad configuration values, failed scenes).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import pipeline, synthkit
from .errors import ConfigError, MVStereoError
from .ioformats import (
    ABLATIONS,
    RunConfig,
    load_config,
    load_scene,
    read_depth_map,
    save_label_map_png,
    write_depth_map,
    write_ply,
)
from .segmentation import fallback_segment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse parser that reports usage problems via exception.

    The default ArgumentParser calls sys.exit(2); this tool reserves exit
    code 2 for data errors, so usage problems are rerouted to exit code 1.
    """

    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="mvstereo", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override RNG seed")
    parser.add_argument("--threads", type=int, default=None, help="worker thread count")
    parser.add_argument(
        "--ablation",
        default=None,
        choices=sorted(ABLATIONS),
        help="disable or swap one engine stage",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_est = sub.add_parser("estimate", help="estimate depth/normal maps")
    p_est.add_argument("scene", help="scene manifest or COLMAP directory")
    p_est.add_argument("--config", default=None, help="configuration file")
    p_est.add_argument("--view", type=int, default=None, help="estimate a single view")
    p_est.add_argument(
        "--depth-range",
        nargs=2,
        type=float,
        default=None,
        metavar=("LO", "HI"),
        help="depth search range (required for COLMAP scenes without one)",
    )
    p_est.set_defaults(func=_cmd_estimate)

    p_fuse = sub.add_parser("fuse", help="fuse depth maps into a point cloud")
    p_fuse.add_argument("scene", help="scene manifest or COLMAP directory")
    p_fuse.add_argument("--config", default=None, help="configuration file")
    p_fuse.add_argument("--depth-range", nargs=2, type=float, default=None)
    p_fuse.set_defaults(func=_cmd_fuse)

    p_synth = sub.add_parser("synth", help="render a synthetic scene")
    p_synth.add_argument("preset", help="preset name (see docs)")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=_cmd_synth)

    p_eval = sub.add_parser("eval", help="score depth maps against ground truth")
    p_eval.add_argument("scene", help="scene manifest or COLMAP directory")
    p_eval.add_argument("--gt", required=True, help="directory of ground-truth maps")
    p_eval.add_argument("--depth-range", nargs=2, type=float, default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_seg = sub.add_parser("segment", help="segment scene images into label maps")
    p_seg.add_argument("scene", help="scene manifest or COLMAP directory")
    p_seg.set_defaults(func=_cmd_segment)

    return parser


def _resolved_output_dir(scene) -> str:
    out = scene.manifest.output_dir
    if not os.path.isabs(out):
        out = os.path.join(scene.manifest.base_dir, out)
    os.makedirs(out, exist_ok=True)
    return out


def _load_run_config(scene, args) -> RunConfig:
    """Scene config.txt if present, --config to replace, flags on top."""
    if getattr(args, "config", None) is not None:
        cfg = load_config(args.config)
    else:
        auto = os.path.join(scene.manifest.base_dir, "config.txt")
        cfg = load_config(auto) if os.path.isfile(auto) else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.ablation is not None:
        overrides["ablation"] = args.ablation
    return cfg.with_overrides(**overrides) if overrides else cfg


def _depth_range_arg(args):
    if getattr(args, "depth_range", None) is None:
        return None
    lo, hi = args.depth_range
    return (float(lo), float(hi))


def _cmd_estimate(args) -> int:
    scene = load_scene(args.scene, depth_range=_depth_range_arg(args))
    cfg = _load_run_config(scene, args)
    out_dir = _resolved_output_dir(scene)

    state = pipeline.build_state(scene, cfg)
    if args.view is not None:
        if not 0 <= args.view < scene.view_count:
            raise ConfigError(
                f"--view {args.view} out of range for {scene.view_count} views"
            )
        pipeline.initialize(state)
        depth, normal, cost, stats = pipeline.run_view(state, args.view)
        view_ids = [args.view]
        logger.info("view %d mean cost by iteration: %s", args.view, stats)
    else:
        pipeline.run_scene(state)
        view_ids = list(range(scene.view_count))

    for vid in view_ids:
        rt = state.views[vid].runtime
        path = os.path.join(out_dir, f"depth_{vid:04d}.bin")
        write_depth_map(path, rt.depth[0], rt.normal[0], rt.cost[0])
        print(path)
    return EXIT_OK


def _cmd_fuse(args) -> int:
    scene = load_scene(args.scene, depth_range=_depth_range_arg(args))
    cfg = _load_run_config(scene, args)
    out_dir = _resolved_output_dir(scene)

    depths, normals = [], []
    for vid in range(scene.view_count):
        depth, normal, _ = read_depth_map(os.path.join(out_dir, f"depth_{vid:04d}.bin"))
        depths.append(depth)
        normals.append(normal)
    images = [img.gray() for img in scene.images]
    cams = [
        cam.at_level(0, scene.images[i].width, scene.images[i].height)
        for i, cam in enumerate(scene.cameras)
    ]
    cloud = pipeline.fuse_maps(
        cams,
        depths,
        normals,
        images,
        consistency_min=cfg.consistency_min,
        rel_depth_tol=cfg.rel_depth_tol,
        normal_angle_tol=cfg.normal_angle_tol,
    )
    path = os.path.join(out_dir, "cloud.ply")
    write_ply(path, cloud.points, cloud.normals, cloud.colors)
    logger.info("fused %d points from %d views", len(cloud), scene.view_count)
    print(path)
    return EXIT_OK


def _cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    scene = synthkit.generate(args.preset, seed=seed)
    path = synthkit.write_scene(scene, args.out)
    print(path)
    return EXIT_OK


def _cmd_eval(args) -> int:
    scene = load_scene(args.scene, depth_range=_depth_range_arg(args))
    out_dir = _resolved_output_dir(scene)
    est, gt = [], []
    for vid in range(scene.view_count):
        d_est, _, _ = read_depth_map(os.path.join(out_dir, f"depth_{vid:04d}.bin"))
        d_gt, _, _ = read_depth_map(os.path.join(args.gt, f"depth_{vid:04d}.bin"))
        est.append(d_est.ravel())
        gt.append(d_gt.ravel())
    rows = synthkit.score(np.concatenate(est), np.concatenate(gt))
    print(f"{'threshold':>10} {'accuracy':>10} {'completeness':>13} {'f1':>8}")
    for row in rows:
        print(
            f"{row.threshold_pct:>9.1f}% {row.accuracy:>9.2f}% "
            f"{row.completeness:>12.2f}% {row.f1:>7.2f}%"
        )
    return EXIT_OK


def _cmd_segment(args) -> int:
    scene = load_scene(args.scene)
    out_dir = _resolved_output_dir(scene)
    for vid, img in enumerate(scene.images):
        labels = fallback_segment(img)
        path = os.path.join(out_dir, f"label_auto_{vid:04d}.png")
        save_label_map_png(path, labels)
        logger.info("view %d: %d regions", vid, int(labels.labels.max()) + 1)
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except MVStereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
