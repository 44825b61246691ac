"""Region-aware patch selection for training-set augmentation.

Each frame is rotated through a list of angles. After every rotation the mask
is split into three disjoint regions (polyp interior, a band around the polyp
contour, and background) and a fixed quota of patch centers is drawn from
each region.

All randomness comes from a single ``numpy.random.Generator`` backed by PCG64.
For a frame at position ``i`` in a dataset the generator is seeded with
``seed ^ i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .imagecore import BinaryMask, Image, crop, flip_horizontal, rotate

INSIDE = "inside"
BOUNDARY = "boundary"
BACKGROUND = "background"
REGIONS = (INSIDE, BACKGROUND, BOUNDARY)

DEFAULT_ANGLES = tuple(int(round(a)) for a in np.linspace(0.0, 290.0, 10))


class RegionExhaustedError(RuntimeError):
    """No valid patch center is available for a required quota."""


@dataclass(frozen=True)
class AugmentConfig:
    patch_size: int = 100
    angles: tuple[float, ...] = DEFAULT_ANGLES
    # (n_inside, n_background, n_boundary)
    counts: tuple[int, int, int] = (6, 4, 5)
    flip_prob: float = 0.5
    band_radius: int = 5
    strategy: str = "smart"
    seed: int = 0

    def __post_init__(self):
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ValueError("counts must be three non-negative integers")
        if self.strategy not in ("smart", "polyp_only"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be a probability")
        if self.band_radius < 0:
            raise ValueError("band_radius must be non-negative")
        object.__setattr__(self, "angles", tuple(self.angles))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def patches_per_image(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True, eq=False)
class RegionPartition:
    """Boolean ``(H, W)`` membership arrays for the three regions."""

    inside: np.ndarray
    boundary: np.ndarray
    background: np.ndarray
    band_radius: int

    def region(self, label: str) -> np.ndarray:
        return {INSIDE: self.inside, BOUNDARY: self.boundary, BACKGROUND: self.background}[label]


@dataclass(frozen=True, eq=False)
class PatchSample:
    image_patch: Image
    mask_patch: BinaryMask
    center: tuple[int, int]
    region: str
    angle: float
    flipped: bool

    def __eq__(self, other):
        return (
            isinstance(other, PatchSample)
            and self.center == other.center
            and self.region == other.region
            and self.angle == other.angle
            and self.flipped == other.flipped
            and self.image_patch == other.image_patch
            and self.mask_patch == other.mask_patch
        )


def contour(mask: BinaryMask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Pixels outside the raster count as background.
    """
    fg = mask.data.astype(bool)
    padded = np.pad(fg, 1, constant_values=False)
    all_fg_neighbours = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return fg & ~all_fg_neighbours


def partition_regions(mask: BinaryMask, band_radius: int) -> RegionPartition:
    fg = mask.data.astype(bool)
    edge = contour(mask)
    if band_radius > 0 and edge.any():
        square = np.ones((2 * band_radius + 1, 2 * band_radius + 1), dtype=bool)
        band = ndimage.binary_dilation(edge, structure=square)
    else:
        band = edge.copy()
    return RegionPartition(
        inside=fg & ~band,
        boundary=band,
        background=~fg & ~band,
        band_radius=band_radius,
    )


def valid_centers(region: np.ndarray, patch_size: int, image_dims: tuple[int, int]) -> np.ndarray:
    """Restrict ``region`` to centers whose patch window fits in the image.

    ``image_dims`` is ``(height, width)``.
    """
    height, width = image_dims
    lo = patch_size // 2
    hi = patch_size - 1 - lo
    out = np.zeros((height, width), dtype=bool)
    if height - hi <= lo or width - hi <= lo:
        return out
    out[lo:height - hi, lo:width - hi] = region[lo:height - hi, lo:width - hi]
    return out


def _draw(rng: np.random.Generator, candidates: np.ndarray, k: int) -> list[tuple[int, int]]:
    ys, xs = np.nonzero(candidates)
    picks = rng.integers(0, ys.size, size=k)
    return [(int(xs[i]), int(ys[i])) for i in picks]


def select_patch_centers(
    partition: RegionPartition,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> list[tuple[tuple[int, int], str]]:
    """Draw labelled patch centers, uniformly and with replacement.

    Quotas of regions with no valid center move to the background quota. If
    background itself has no valid center (a polyp filling the frame), its
    quota moves to boundary, or failing that to inside. Only a frame with no
    valid center anywhere raises :class:`RegionExhaustedError`.
    """
    dims = partition.inside.shape
    valid = {
        label: valid_centers(partition.region(label), config.patch_size, dims)
        for label in REGIONS
    }
    n_inside, n_background, n_boundary = config.counts

    if config.strategy == "smart":
        quotas = {INSIDE: n_inside, BACKGROUND: n_background, BOUNDARY: n_boundary}
        for label in (INSIDE, BOUNDARY):
            if quotas[label] and not valid[label].any():
                quotas[BACKGROUND] += quotas[label]
                quotas[label] = 0
        if quotas[BACKGROUND] and not valid[BACKGROUND].any():
            fallback = next((r for r in (BOUNDARY, INSIDE) if valid[r].any()), None)
            if fallback is None:
                raise RegionExhaustedError(
                    f"no valid patch centers in any region for patch size {config.patch_size}"
                )
            quotas[fallback] += quotas[BACKGROUND]
            quotas[BACKGROUND] = 0
        out = []
        for label in REGIONS:
            out.extend((c, label) for c in _draw(rng, valid[label], quotas[label]))
        return out

    total = config.patches_per_image
    polyp = valid[INSIDE] | valid[BOUNDARY]
    if not polyp.any():
        if total and not valid[BACKGROUND].any():
            raise RegionExhaustedError(
                f"no valid patch centers in any region for patch size {config.patch_size}"
            )
        return [(c, BACKGROUND) for c in _draw(rng, valid[BACKGROUND], total)]
    return [
        (c, INSIDE if valid[INSIDE][c[1], c[0]] else BOUNDARY)
        for c in _draw(rng, polyp, total)
    ]


def extract_training_set(
    image: Image,
    mask: BinaryMask,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> list[PatchSample]:
    if (image.height, image.width) != (mask.height, mask.width):
        raise ValueError(
            f"image {image.width}x{image.height} and mask {mask.width}x{mask.height} differ in size"
        )
    samples = []
    for angle in config.angles:
        rot_image = rotate(image, angle, "bilinear")
        rot_mask = rotate(mask, angle, "nearest")
        partition = partition_regions(rot_mask, config.band_radius)
        for center, label in select_patch_centers(partition, config, rng):
            img_patch = crop(rot_image, center, config.patch_size)
            mask_patch = crop(rot_mask, center, config.patch_size)
            flipped = bool(rng.random() < config.flip_prob)
            if flipped:
                img_patch = flip_horizontal(img_patch)
                mask_patch = flip_horizontal(mask_patch)
            samples.append(PatchSample(img_patch, mask_patch, center, label, angle, flipped))
    return samples


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng((int(seed) ^ int(frame_index)) & 0xFFFFFFFFFFFFFFFF)


def extract_dataset(
    frames: Sequence[tuple[Image, BinaryMask]],
    config: AugmentConfig,
) -> list[list[PatchSample]]:
    """Per-frame patch lists, each frame driven by its own sub-seed."""
    return [
        extract_training_set(image, mask, config, frame_rng(config.seed, i))
        for i, (image, mask) in enumerate(frames)
    ]
