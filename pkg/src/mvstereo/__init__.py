"""PatchMatch multi-view stereo with segmentation-driven patch deformation.

Per-pixel plane hypotheses (depth plus camera-facing normal) are estimated
with checkerboard propagation, spherical normal refinement, and a matching
cost that blends bilateral-weighted NCC across pyramid levels with
reprojection and curvature terms whose weights are tuned online. Per-view
depth maps are fused into a consistency-checked point cloud.
"""

from .errors import MVStereoError
from .geometry import CameraModel, PlaneHypothesis
from .imaging import ImageGrid, ScalePyramid, build_pyramid
from .ioformats import LoadedScene, RunConfig, load_config, load_scene
from .pipeline import (
    FusedPointCloud,
    SceneState,
    build_state,
    fuse,
    initialize,
    run_scene,
    run_view,
    state_from_synth,
)
from .segmentation import InstanceLabelMap, deform_patch, propagation_pattern
from .synthkit import SynthScene, generate, score, write_scene

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "FusedPointCloud",
    "ImageGrid",
    "InstanceLabelMap",
    "LoadedScene",
    "MVStereoError",
    "PlaneHypothesis",
    "RunConfig",
    "ScalePyramid",
    "SceneState",
    "SynthScene",
    "build_pyramid",
    "build_state",
    "deform_patch",
    "fuse",
    "generate",
    "initialize",
    "load_config",
    "load_scene",
    "propagation_pattern",
    "run_scene",
    "run_view",
    "score",
    "state_from_synth",
    "write_scene",
    "__version__",
]
