"""Scene manifests, label/depth/point-cloud formats, and run configuration.

Formats:
  - native manifest: line-oriented text, one ``image`` block per view.
  - COLMAP-convention import: a directory holding cameras.txt / images.txt.
  - label maps: 16-bit single-channel PNG or an RLE text sidecar.
  - depth maps: little-endian binary, magic ``SDMD``, u32 dims, f32 planes.
  - point clouds: binary little-endian PLY with position/normal/color.
  - config: ``key=value`` lines; unknown keys are hard errors.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np
from PIL import Image

from .cost import Hyperparameters
from .errors import (
    ConfigError,
    DecodeError,
    DimensionMismatchError,
    MagicMismatchError,
    MissingFileError,
    ParseError,
    TruncatedFileError,
)
from .geometry import CameraModel, rotation_from_quaternion
from .imaging import ImageGrid
from .segmentation import InstanceLabelMap

ABLATIONS = (
    "none",
    "acm-cost",
    "no-adp-cost",
    "no-mul-cost",
    "acm-prop",
    "no-adp-prop",
    "no-mul-prop",
    "no-ref",
    "eq9-ref",
    "no-em",
)

_DEPTH_MAGIC = b"SDMD"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline, with the published defaults."""

    seed: int = 0
    threads: int = 1
    iterations: int = 3
    l_side: int = 11
    k: int = 3
    n_max: int = 3
    eta: float = 0.1
    tau: float = 2.0
    tau_rp: float = 2.0
    w_ms: float = 1.0
    w_rp: float = 0.2
    w_pc: float = 0.2
    top_m: int = 2
    min_samples: int = 9
    sigma_c: float = 0.1
    sigma_s: float = 0.0  # 0 -> derived as l_side / 2
    pc_mode: str = "literal"
    cap_distance: int = 0  # 0 -> derived as 2 * l_side
    min_anchors: int = 50
    em_scope: str = "view"
    mu_start: float = 1e-1
    mu_final: float = 1e-3
    consistency_min: int = 2
    rel_depth_tol: float = 0.01
    normal_angle_tol: float = 10.0
    ablation: str = "none"
    full_rodrigues: bool = False
    raw_descent: bool = False

    def __post_init__(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; valid: {ABLATIONS}")
        if self.pc_mode not in ("literal", "capped"):
            raise ConfigError(f"unknown pc_mode {self.pc_mode!r}")
        if self.em_scope not in ("view", "global"):
            raise ConfigError(f"unknown em_scope {self.em_scope!r}")
        if self.iterations < 0 or self.threads < 1 or self.top_m < 1:
            raise ConfigError("iterations >= 0, threads >= 1, top_m >= 1 required")

    @property
    def effective_sigma_s(self) -> float:
        return self.sigma_s if self.sigma_s > 0.0 else self.l_side / 2.0

    @property
    def effective_cap_distance(self) -> int:
        return self.cap_distance if self.cap_distance > 0 else 2 * self.l_side

    # ablation switches -----------------------------------------------------
    @property
    def adaptive_cost_window(self) -> bool:
        return self.ablation not in ("acm-cost", "no-adp-cost")

    @property
    def classic_cost_window(self) -> bool:
        return self.ablation == "acm-cost"

    @property
    def multi_scale_cost(self) -> bool:
        return self.ablation not in ("acm-cost", "no-mul-cost")

    @property
    def adaptive_propagation(self) -> bool:
        return self.ablation not in ("acm-prop", "no-adp-prop")

    @property
    def multi_scale_propagation(self) -> bool:
        return self.ablation not in ("acm-prop", "no-mul-prop")

    @property
    def refinement_enabled(self) -> bool:
        return self.ablation != "no-ref"

    @property
    def refinement_mode(self) -> str:
        return "eq9" if self.ablation == "eq9-ref" else "spherical"

    @property
    def em_enabled(self) -> bool:
        return self.ablation != "no-em"

    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(
            w_ms=self.w_ms, w_rp=self.w_rp, w_pc=self.w_pc, tau=self.tau,
            l_side=self.l_side, k=self.k, n_max=self.n_max, eta=self.eta,
        )

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


_CONFIG_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def parse_config_items(items, base: RunConfig | None = None) -> RunConfig:
    """Apply ``(key, value)`` string pairs onto a config, strictly typed."""
    cfg = base or RunConfig()
    updates = {}
    for key, value in items:
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                low = value.strip().lower()
                if low in _BOOL_TRUE:
                    parsed = True
                elif low in _BOOL_FALSE:
                    parsed = False
                else:
                    raise ValueError(value)
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value.strip()
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from exc
        updates[key] = parsed
    try:
        return cfg.with_overrides(**updates)
    except ConfigError:
        raise
    except Exception as exc:  # dataclass-level validation
        raise ConfigError(str(exc)) from exc


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Read a ``key=value`` config file (comments and blank lines allowed)."""
    if not os.path.isfile(path):
        raise MissingFileError(f"config file not found: {path}")
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = stripped.partition("=")
            items.append((key.strip(), value))
    return parse_config_items(items, base)


def write_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(RunConfig):
            fh.write(f"{f.name}={getattr(cfg, f.name)}\n")


# ---------------------------------------------------------------------------
# images


def load_image(path) -> ImageGrid:
    """Decode a PNG/PPM file into a float32 grid in [0, 1]."""
    if not os.path.isfile(path):
        raise MissingFileError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return ImageGrid.from_array(arr)


def save_image(path, img: ImageGrid) -> None:
    arr = np.clip(img.samples, 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# label maps


def save_label_map_png(path, m: InstanceLabelMap) -> None:
    if m.labels.max(initial=0) > 0xFFFF:
        raise ValueError("instance ids beyond 16-bit range")
    Image.fromarray(m.labels.astype(np.uint16)).save(path)


def save_label_map_rle(path, m: InstanceLabelMap) -> None:
    flat = m.labels.ravel()
    change = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"RLE {m.width} {m.height}\n")
        fh.write(
            " ".join(f"{int(flat[s])} {int(e - s)}" for s, e in zip(starts, ends))
        )
        fh.write("\n")


def load_label_map(path, width: int, height: int) -> InstanceLabelMap:
    """Decode a 16-bit PNG or RLE sidecar label map, dimension-checked."""
    if not os.path.isfile(path):
        raise MissingFileError(f"label map not found: {path}")
    if str(path).endswith(".png"):
        try:
            with Image.open(path) as im:
                arr = np.asarray(im)
        except (OSError, SyntaxError) as exc:
            raise DecodeError(f"cannot decode label map {path}: {exc}") from exc
        if arr.ndim != 2:
            raise DecodeError(f"label map {path} must be single-channel")
        labels = arr.astype(np.int32)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 3 or header[0] != "RLE":
                raise DecodeError(f"label map {path}: bad RLE header")
            w, h = int(header[1]), int(header[2])
            tokens = fh.read().split()
        if len(tokens) % 2 != 0:
            raise DecodeError(f"label map {path}: odd RLE token count")
        vals = np.array(tokens[0::2], dtype=np.int64)
        runs = np.array(tokens[1::2], dtype=np.int64)
        if runs.sum() != w * h:
            raise DecodeError(f"label map {path}: RLE runs cover {runs.sum()} != {w * h}")
        labels = np.repeat(vals, runs).astype(np.int32).reshape(h, w)
    if labels.shape != (height, width):
        raise DimensionMismatchError(
            f"label map {path} is {labels.shape[1]}x{labels.shape[0]}, "
            f"expected {width}x{height}"
        )
    return InstanceLabelMap(width=width, height=height, labels=labels)


# ---------------------------------------------------------------------------
# depth maps


def write_depth_map(path, depth: np.ndarray, normal: np.ndarray, cost: np.ndarray) -> None:
    """Serialize one view's maps; see module docstring for the layout."""
    depth = np.asarray(depth, dtype=np.float32)
    h, w = depth.shape
    if h == 0 or w == 0:
        raise ValueError("refusing to write an empty depth map")
    normal = np.asarray(normal, dtype=np.float32).reshape(h, w, 3)
    cost = np.asarray(cost, dtype=np.float32).reshape(h, w)
    with open(path, "wb") as fh:
        fh.write(_DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(depth.astype("<f4").tobytes())
        fh.write(normal.astype("<f4").tobytes())
        fh.write(cost.astype("<f4").tobytes())


def read_depth_map(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise MissingFileError(f"depth map not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DEPTH_MAGIC:
        raise MagicMismatchError(f"{path}: not a depth-map file")
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    w, h = struct.unpack_from("<II", blob, 4)
    if w == 0 or h == 0:
        raise TruncatedFileError(f"{path}: zero-sized map")
    need = 12 + 4 * w * h * 5
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(blob)}")
    body = np.frombuffer(blob, dtype="<f4", count=w * h * 5, offset=12)
    depth = body[: w * h].reshape(h, w).copy()
    normal = body[w * h : 4 * w * h].reshape(h, w, 3).copy()
    cost = body[4 * w * h :].reshape(h, w).copy()
    return depth, normal, cost


# ---------------------------------------------------------------------------
# point clouds


def write_ply(path, points: np.ndarray, normals: np.ndarray, colors: np.ndarray) -> None:
    """Binary little-endian PLY with float positions/normals and u8 colors."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    nrm = np.asarray(normals, dtype="<f4").reshape(-1, 3)
    col = np.asarray(colors).reshape(-1, 3)
    if col.dtype != np.uint8:
        col = (np.clip(col, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    n = pts.shape[0]
    if nrm.shape[0] != n or col.shape[0] != n:
        raise ValueError("point/normal/color counts differ")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.zeros(
        n,
        dtype=[("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3)],
    )
    rec["xyz"] = pts
    rec["n"] = nrm
    rec["rgb"] = col
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read back the PLY layout produced by write_ply."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if end < 0:
        raise ParseError(f"{path}: missing PLY header terminator")
    header = blob[:end].decode("ascii").splitlines()
    count = None
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    if count is None:
        raise ParseError(f"{path}: missing vertex element")
    body = blob[end + len(b"end_header\n") :]
    rec = np.frombuffer(
        body,
        dtype=[("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3)],
        count=count,
    )
    return rec["xyz"].copy(), rec["n"].copy(), rec["rgb"].copy()


# ---------------------------------------------------------------------------
# scene manifests


@dataclass(frozen=True)
class SceneManifest:
    image_paths: tuple[str, ...]
    cameras: tuple[CameraModel, ...]
    label_paths: tuple[str | None, ...]
    depth_range: tuple[float, float]
    output_dir: str
    match_file: str | None = None
    base_dir: str = "."


@dataclass(frozen=True)
class LoadedScene:
    manifest: SceneManifest
    images: tuple[ImageGrid, ...] = field(repr=False)

    @property
    def cameras(self) -> tuple[CameraModel, ...]:
        return self.manifest.cameras

    @property
    def view_count(self) -> int:
        return len(self.images)


def _parse_floats(parts, n, where):
    if len(parts) != n:
        raise ParseError(f"{where}: expected {n} numbers, got {len(parts)}")
    try:
        return [float(v) for v in parts]
    except ValueError as exc:
        raise ParseError(f"{where}: bad number ({exc})") from exc


def write_manifest(path, manifest: SceneManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# scene manifest\n")
        fh.write(f"depth_range {manifest.depth_range[0]} {manifest.depth_range[1]}\n")
        fh.write(f"output_dir {manifest.output_dir}\n")
        if manifest.match_file:
            fh.write(f"match_file {manifest.match_file}\n")
        for i, img_path in enumerate(manifest.image_paths):
            cam = manifest.cameras[i]
            fh.write(f"image {img_path}\n")
            fh.write("K " + " ".join(repr(float(v)) for v in cam.K.ravel()) + "\n")
            fh.write("R " + " ".join(repr(float(v)) for v in cam.R.ravel()) + "\n")
            fh.write("C " + " ".join(repr(float(v)) for v in cam.C.ravel()) + "\n")
            if manifest.label_paths[i]:
                fh.write(f"labels {manifest.label_paths[i]}\n")
            fh.write("end\n")


def _load_native_manifest(path) -> SceneManifest:
    base_dir = os.path.dirname(os.path.abspath(path))
    depth_range = None
    output_dir = "out"
    match_file = None
    image_paths: list[str] = []
    label_paths: list[str | None] = []
    cameras: list[CameraModel] = []

    current: dict | None = None

    def finish(where):
        nonlocal current
        if current is None:
            return
        for key in ("K", "R", "C"):
            if key not in current:
                raise ParseError(f"{where}: image block missing {key}")
        k = np.array(current["K"]).reshape(3, 3)
        r = np.array(current["R"]).reshape(3, 3)
        c = np.array(current["C"])
        # width/height are sized after image decode in load_scene; defer by
        # storing raw matrices — the camera is validated there.
        image_paths.append(current["path"])
        label_paths.append(current.get("labels"))
        cameras.append((k, r, c))  # type: ignore[arg-type]
        current = None

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            where = f"{path}:{lineno}"
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            parts = rest.split()
            if key == "depth_range":
                lo, hi = _parse_floats(parts, 2, where)
                depth_range = (lo, hi)
            elif key == "output_dir":
                output_dir = rest.strip()
            elif key == "match_file":
                match_file = rest.strip()
            elif key == "image":
                finish(where)
                if not rest.strip():
                    raise ParseError(f"{where}: image needs a path")
                current = {"path": rest.strip()}
            elif key in ("K", "R", "C"):
                if current is None:
                    raise ParseError(f"{where}: {key} outside an image block")
                current[key] = _parse_floats(parts, 9 if key in ("K", "R") else 3, where)
            elif key == "labels":
                if current is None:
                    raise ParseError(f"{where}: labels outside an image block")
                current["labels"] = rest.strip()
            elif key == "end":
                finish(where)
            else:
                raise ParseError(f"{where}: unknown directive {key!r}")
    finish(path)

    if depth_range is None:
        raise ParseError(f"{path}: missing depth_range")
    if depth_range[0] <= 0 or depth_range[0] >= depth_range[1]:
        raise ParseError(f"{path}: depth_range must satisfy 0 < min < max")
    if len(image_paths) < 2:
        raise ParseError(f"{path}: a scene needs at least 2 images")
    return SceneManifest(
        image_paths=tuple(image_paths),
        cameras=tuple(cameras),  # raw triples; materialized in load_scene
        label_paths=tuple(label_paths),
        depth_range=depth_range,
        output_dir=output_dir,
        match_file=match_file,
        base_dir=base_dir,
    )


def _load_colmap_dir(path, depth_range, output_dir) -> SceneManifest:
    cam_file = os.path.join(path, "cameras.txt")
    img_file = os.path.join(path, "images.txt")
    for f in (cam_file, img_file):
        if not os.path.isfile(f):
            raise MissingFileError(f"COLMAP file not found: {f}")
    if depth_range is None:
        raise ParseError("COLMAP import needs an explicit depth range")

    intrinsics: dict[int, tuple[np.ndarray, int, int]] = {}
    with open(cam_file, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 5:
                raise ParseError(f"{cam_file}:{lineno}: short camera line")
            cam_id, model = int(parts[0]), parts[1]
            w, h = int(parts[2]), int(parts[3])
            params = [float(v) for v in parts[4:]]
            if model == "PINHOLE":
                fx, fy, cx, cy = params[:4]
            elif model == "SIMPLE_PINHOLE":
                fx = fy = params[0]
                cx, cy = params[1], params[2]
            else:
                raise ParseError(f"{cam_file}:{lineno}: unsupported model {model}")
            k = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1]], dtype=np.float64)
            intrinsics[cam_id] = (k, w, h)

    image_paths, cameras, label_paths = [], [], []
    with open(img_file, "r", encoding="utf-8") as fh:
        lines = [
            ln.strip()
            for ln in fh
            if ln.strip() and not ln.strip().startswith("#")
        ]
    for i in range(0, len(lines), 2):  # every second line lists 2D points
        parts = lines[i].split()
        if len(parts) < 10:
            raise ParseError(f"{img_file}: malformed image line: {lines[i][:60]}")
        qw, qx, qy, qz = (float(v) for v in parts[1:5])
        tx, ty, tz = (float(v) for v in parts[5:8])
        cam_id = int(parts[8])
        name = parts[9]
        if cam_id not in intrinsics:
            raise ParseError(f"{img_file}: image {name} references camera {cam_id}")
        r = rotation_from_quaternion(qw, qx, qy, qz)
        t = np.array([tx, ty, tz])
        c = -r.T @ t
        k, _, _ = intrinsics[cam_id]
        rel = name if os.path.isfile(os.path.join(path, name)) else os.path.join("images", name)
        image_paths.append(rel)
        cameras.append((k, r, c))
        label_paths.append(None)

    if len(image_paths) < 2:
        raise ParseError(f"{img_file}: a scene needs at least 2 images")
    return SceneManifest(
        image_paths=tuple(image_paths),
        cameras=tuple(cameras),
        label_paths=tuple(label_paths),
        depth_range=depth_range,
        output_dir=output_dir or "out",
        match_file=None,
        base_dir=os.path.abspath(path),
    )


def load_scene(path, depth_range=None, output_dir=None) -> LoadedScene:
    """Load a native manifest file or a COLMAP-convention directory."""
    if os.path.isdir(path):
        manifest = _load_colmap_dir(path, depth_range, output_dir)
    elif os.path.isfile(path):
        manifest = _load_native_manifest(path)
        if depth_range is not None:
            manifest = replace(manifest, depth_range=depth_range)
        if output_dir is not None:
            manifest = replace(manifest, output_dir=output_dir)
    else:
        raise MissingFileError(f"scene not found: {path}")

    images = []
    cameras = []
    for img_path, raw_cam in zip(manifest.image_paths, manifest.cameras):
        full = os.path.join(manifest.base_dir, img_path)
        img = load_image(full)
        k, r, c = raw_cam
        cameras.append(
            CameraModel(K=k, R=r, C=c, width=img.width, height=img.height)
        )
        images.append(img)
    for lbl in manifest.label_paths:
        if lbl is not None and not os.path.isfile(os.path.join(manifest.base_dir, lbl)):
            raise MissingFileError(f"label map not found: {lbl}")
    if manifest.match_file is not None and not os.path.isfile(
        os.path.join(manifest.base_dir, manifest.match_file)
    ):
        raise MissingFileError(f"match file not found: {manifest.match_file}")
    manifest = replace(manifest, cameras=tuple(cameras))
    return LoadedScene(manifest=manifest, images=tuple(images))
