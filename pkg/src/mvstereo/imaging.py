"""Image storage, Laplacian stencils, bilinear sampling, and packed pyramids.

The pyramid keeps every level inside one contiguous float32 arena (mipmap
packing), so the total footprint stays within the 4/3 geometric-series bound
of the base level and a single buffer hand-off suffices for data-parallel
workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfBoundsError, TooSmallError

#: Smallest side length a pyramid level may have.
MIN_LEVEL_DIM = 8

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class ImageGrid:
    """Row-major float32 image with 1 or 3 channels, intensities in [0, 1]."""

    width: int
    height: int
    channels: int
    samples: np.ndarray  # (height, width, channels) float32

    def __post_init__(self) -> None:
        arr = self.samples
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if arr.shape != (self.height, self.width, self.channels):
            raise ValueError(
                f"samples shape {arr.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}"
            )
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_array(cls, arr) -> "ImageGrid":
        """Wrap an (h, w) or (h, w, c) array as an ImageGrid."""
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        h, w, c = a.shape
        return cls(width=w, height=h, channels=c, samples=a)

    def gray(self) -> np.ndarray:
        """(h, w) float32 grayscale view (Rec. 601 luma for color images)."""
        if self.channels == 1:
            return self.samples[:, :, 0]
        return self.samples @ _LUMA


def downsample(img: ImageGrid) -> ImageGrid:
    """Half-resolution image via 2x2 box average (floor dimensions).

    Raises:
        TooSmallError: if either input dimension is below 16 (the output
            would drop under the 8-pixel level floor).
    """
    if img.width < 2 * MIN_LEVEL_DIM or img.height < 2 * MIN_LEVEL_DIM:
        raise TooSmallError(
            f"downsample needs dims >= {2 * MIN_LEVEL_DIM}, got {img.width}x{img.height}"
        )
    w2, h2 = img.width // 2, img.height // 2
    cropped = img.samples[: 2 * h2, : 2 * w2, :]
    out = cropped.reshape(h2, 2, w2, 2, img.channels).mean(axis=(1, 3), dtype=np.float32)
    return ImageGrid(width=w2, height=h2, channels=img.channels, samples=out)


def _box_halve_into(src: np.ndarray, dst: np.ndarray) -> None:
    h2, w2, c = dst.shape
    cropped = src[: 2 * h2, : 2 * w2, :]
    np.mean(
        cropped.reshape(h2, 2, w2, 2, c), axis=(1, 3), dtype=np.float32, out=dst
    )


def pyramid_dims(width: int, height: int, k: int) -> list[tuple[int, int]]:
    """(width, height) for levels 0..k under iterated floor-halving.

    Raises:
        TooSmallError: if k < 1 or any level would fall below the 8-px floor.
    """
    if k < 1:
        raise TooSmallError("a pyramid needs k >= 1 downsampled levels")
    dims = [(width, height)]
    for _ in range(k):
        w, h = dims[-1]
        w2, h2 = w // 2, h // 2
        if w2 < MIN_LEVEL_DIM or h2 < MIN_LEVEL_DIM:
            raise TooSmallError(
                f"{width}x{height} does not allow {k} halvings above the "
                f"{MIN_LEVEL_DIM}-pixel floor"
            )
        dims.append((w2, h2))
    return dims


@dataclass(frozen=True)
class ScalePyramid:
    """k+1 image levels packed into one contiguous float32 arena.

    ``levels[i].samples`` is a view into ``arena``; level offsets (in samples)
    are exposed so flat multi-level indexing can address any level through a
    single gather.
    """

    arena: np.ndarray  # 1-D float32
    levels: tuple[ImageGrid, ...]
    offsets: tuple[int, ...]

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def total_samples(self) -> int:
        return int(self.arena.size)


def build_pyramid(img: ImageGrid, k: int) -> ScalePyramid:
    """Build the packed pyramid with k downsampled levels below level 0.

    Each level is the 2x2 box average of the previous one; all levels live in
    a single arena whose size obeys
    ``total <= ceil(4/3 * level0_samples) + (k+1) * 64``.
    """
    dims = pyramid_dims(img.width, img.height, k)
    c = img.channels
    sizes = [w * h * c for w, h in dims]
    offsets = np.concatenate([[0], np.cumsum(sizes[:-1])]).astype(np.int64)
    arena = np.empty(int(np.sum(sizes)), dtype=np.float32)

    levels: list[ImageGrid] = []
    for lvl, (w, h) in enumerate(dims):
        view = arena[offsets[lvl] : offsets[lvl] + sizes[lvl]].reshape(h, w, c)
        if lvl == 0:
            view[:] = img.samples
        else:
            _box_halve_into(levels[lvl - 1].samples, view)
        view.setflags(write=False)
        levels.append(ImageGrid(width=w, height=h, channels=c, samples=view))

    arena.setflags(write=False)
    pyr = ScalePyramid(arena=arena, levels=tuple(levels), offsets=tuple(int(o) for o in offsets))
    bound = int(np.ceil(4.0 / 3.0 * sizes[0])) + 64 * len(levels)
    assert pyr.total_samples <= bound, "pyramid arena exceeded the 4/3 bound"
    return pyr


def laplacian(img: ImageGrid) -> ImageGrid:
    """Per-channel 4-neighbour Laplacian, 4*I(p) - sum(neighbours).

    Border pixels use clamp-to-edge neighbours, so the output has the same
    dimensions as the input. Values are not clipped to [0, 1]; wrap the
    result in a plain array context, not a display image.
    """
    padded = np.pad(img.samples, ((1, 1), (1, 1), (0, 0)), mode="edge")
    center = padded[1:-1, 1:-1, :]
    out = (
        4.0 * center
        - padded[:-2, 1:-1, :]
        - padded[2:, 1:-1, :]
        - padded[1:-1, :-2, :]
        - padded[1:-1, 2:, :]
    ).astype(np.float32)
    grid = object.__new__(ImageGrid)
    object.__setattr__(grid, "width", img.width)
    object.__setattr__(grid, "height", img.height)
    object.__setattr__(grid, "channels", img.channels)
    out.setflags(write=False)
    object.__setattr__(grid, "samples", out)
    return grid


def laplacian_at(img: ImageGrid, pixel) -> np.ndarray:
    """Per-channel Laplacian value at an integer pixel (clamped neighbours)."""
    x, y = int(pixel[0]), int(pixel[1])
    if not (0 <= x < img.width and 0 <= y < img.height):
        raise OutOfBoundsError(f"pixel ({x}, {y}) outside {img.width}x{img.height}")
    s = img.samples
    xl, xr = max(x - 1, 0), min(x + 1, img.width - 1)
    yu, yd = max(y - 1, 0), min(y + 1, img.height - 1)
    return (4.0 * s[y, x] - s[y, xl] - s[y, xr] - s[yu, x] - s[yd, x]).astype(np.float64)


def sample_bilinear(img: ImageGrid, x, y) -> np.ndarray:
    """Bilinear interpolation at fractional coordinates.

    Accepts scalars or arrays; returns (..., channels) float64. Coordinates
    must lie inside [0, width-1] x [0, height-1].

    Raises:
        OutOfBoundsError: for any coordinate outside the valid rectangle.
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if np.any(xs < 0) or np.any(xs > img.width - 1) or np.any(ys < 0) or np.any(ys > img.height - 1):
        raise OutOfBoundsError("bilinear sample outside the image rectangle")
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, img.width - 2) if img.width > 1 else np.zeros_like(xs, dtype=np.int64)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, img.height - 2) if img.height > 1 else np.zeros_like(ys, dtype=np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    s = img.samples.astype(np.float64)
    v00 = s[y0, x0]
    v01 = s[y0, x0 + 1] if img.width > 1 else v00
    v10 = s[y0 + 1, x0] if img.height > 1 else v00
    v11 = s[y0 + 1, x0 + 1] if img.width > 1 and img.height > 1 else v00
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy
