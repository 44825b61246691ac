"""Raster types, binary Netpbm I/O and the geometric primitives used by the
augmentation and prediction code.

Images are stored as ``(height, width, channels)`` float64 arrays with values
in ``[0, 1]``; masks and probability maps are ``(height, width)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import TypeVar, Union

import numpy as np

__all__ = [
    "Image",
    "BinaryMask",
    "ProbMap",
    "ImageFormatError",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "rotate",
    "flip_horizontal",
    "crop",
    "quantize",
]


class ImageFormatError(ValueError):
    """Malformed or unsupported Netpbm payload.

    ``offset`` is the byte offset in the file where the problem was found.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be HxWx1 or HxWx3, got {data.shape}")
        if data.size and (not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"mask data must be 2-D, got shape {data.shape}")
        if data.dtype != np.uint8:
            if data.size and not np.all((data == 0) | (data == 1)):
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ProbMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"probability map must be 2-D, got shape {data.shape}")
        if data.size and (not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, ProbMap) and np.array_equal(self.data, other.data)


Raster = TypeVar("Raster", Image, BinaryMask)
PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Netpbm I/O
# ---------------------------------------------------------------------------

def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes with round-half-up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def _read_netpbm(path: PathLike) -> tuple[str, int, int, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"no such image file: {path}") from None

    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header", pos)
        tokens.append((raw[start:pos], start))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header", pos)
    pos += 1

    magic, magic_at = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}", magic_at)
    dims = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: malformed header token {tok!r}", at)
        dims.append(int(tok))
    width, height, maxval = dims
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} != 255", tokens[3][1])
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: non-positive dimensions {width}x{height}", tokens[1][1])

    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise ImageFormatError(
            f"{path}: truncated payload, expected {need} bytes, found {len(payload)}",
            pos + len(payload),
        )
    return magic.decode(), width, height, payload


def _write_netpbm(path: PathLike, pixels: np.ndarray) -> None:
    height, width = pixels.shape[:2]
    magic = b"P5" if pixels.ndim == 2 else b"P6"
    header = magic + b"\n" + f"{width} {height}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def load_image(path: PathLike) -> Image:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    magic, width, height, payload = _read_netpbm(path)
    channels = 1 if magic == "P5" else 3
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(pixels / 255.0)


def save_image(image: Image, path: PathLike) -> None:
    pixels = quantize(image.data)
    if image.channels == 1:
        pixels = pixels[:, :, 0]
    _write_netpbm(path, pixels)


def load_mask(path: PathLike) -> BinaryMask:
    magic, width, height, payload = _read_netpbm(path)
    if magic != "P5":
        raise ImageFormatError(f"{path}: masks must be P5, got {magic}", 0)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    bad = np.flatnonzero((pixels != 0) & (pixels != 255))
    if bad.size:
        idx = int(bad[0])
        raise ImageFormatError(f"non-binary mask value {pixels.flat[idx]} at pixel {idx}")
    return BinaryMask((pixels == 255).astype(np.uint8))


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    _write_netpbm(path, mask.data.astype(np.uint8) * 255)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _source_coords(height: int, width: int, angle: float) -> tuple[np.ndarray, np.ndarray]:
    # inverse mapping: output pixel -> source position, rotation about the
    # raster center, positive angle = counter-clockwise on screen (y down)
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    src_x = cx + c * dx - s * dy
    src_y = cy + s * dx + c * dy
    return src_x, src_y


def rotate(raster: Raster, angle: float, mode: str = "bilinear") -> Raster:
    """Rotate about the raster center on a fixed canvas.

    Out-of-bounds source positions are clamped to the nearest edge pixel.
    Masks must use ``mode="nearest"``.
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if isinstance(raster, BinaryMask) and mode != "nearest":
        raise ValueError("bilinear rotation is not allowed for binary masks")
    if float(angle) % 360.0 == 0.0:
        return type(raster)(raster.data.copy())

    data = raster.data
    height, width = data.shape[:2]
    src_x, src_y = _source_coords(height, width, angle)
    src_x = np.clip(src_x, 0.0, width - 1.0)
    src_y = np.clip(src_y, 0.0, height - 1.0)

    if mode == "nearest":
        xi = np.floor(src_x + 0.5).astype(np.intp)
        yi = np.floor(src_y + 0.5).astype(np.intp)
        return type(raster)(data[yi, xi])

    x0 = np.floor(src_x).astype(np.intp)
    y0 = np.floor(src_y).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (src_x - x0)[:, :, None]
    fy = (src_y - y0)[:, :, None]
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    return Image(np.clip(out, 0.0, 1.0))


def flip_horizontal(raster: Raster) -> Raster:
    return type(raster)(raster.data[:, ::-1].copy())


def crop(raster: Raster, center: tuple[int, int], size: int) -> Raster:
    """Copy the ``size`` x ``size`` window centered at ``center = (x, y)``.

    The window's top-left corner is ``(x - size // 2, y - size // 2)``.
    """
    x, y = int(center[0]), int(center[1])
    height, width = raster.data.shape[:2]
    left, top = x - size // 2, y - size // 2
    right, bottom = left + size, top + size
    if size <= 0:
        raise ValueError(f"crop size must be positive, got {size}")
    if left < 0:
        raise ValueError(f"crop window at {center} size {size} exceeds the left edge")
    if top < 0:
        raise ValueError(f"crop window at {center} size {size} exceeds the top edge")
    if right > width:
        raise ValueError(f"crop window at {center} size {size} exceeds the right edge")
    if bottom > height:
        raise ValueError(f"crop window at {center} size {size} exceeds the bottom edge")
    return type(raster)(raster.data[top:bottom, left:right].copy())
