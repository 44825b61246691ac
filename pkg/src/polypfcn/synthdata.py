"""Synthetic colonoscopy-like frames with exact ground-truth masks.

Each frame is a vignetted, pinkish tissue background modulated by smooth
value noise, with one elliptical polyp drawn brighter and redder than its
surroundings. Intensity falls off radially inside the polyp while the mask
keeps a hard edge. A small specular highlight may be added anywhere.

Frame ``i`` is drawn from a PCG64 generator seeded with
``SeedSequence([seed, i])``, so frames can be produced in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import BinaryMask, Image, save_image, save_mask

MAX_ATTEMPTS = 100
NOISE_GRID = 5


@dataclass(frozen=True)
class SynthConfig:
    count: int = 300
    size: int = 64
    polyp_area_range: tuple[float, float] = (0.03, 0.25)
    noise_amplitude: float = 0.05
    highlight_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.polyp_area_range
        if not 0.0 < lo <= hi < 0.5:
            raise ValueError("polyp_area_range must satisfy 0 < lo <= hi < 0.5")
        if self.size < 32:
            raise ValueError("size must be >= 32")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.noise_amplitude < 0 or not 0 <= self.highlight_prob <= 1:
            raise ValueError("invalid noise_amplitude or highlight_prob")
        object.__setattr__(self, "polyp_area_range", (float(lo), float(hi)))


def value_noise(rng: np.random.Generator, size: int, grid: int = NOISE_GRID) -> np.ndarray:
    """Coarse uniform [-1, 1] grid bilinearly upsampled to ``size x size``."""
    coarse = rng.uniform(-1.0, 1.0, size=(grid, grid))
    pos = np.linspace(0.0, grid - 1.0, size)
    i0 = np.minimum(np.floor(pos).astype(int), grid - 2)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _draw_ellipse(rng, size, area_range):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    lo, hi = area_range
    for _ in range(MAX_ATTEMPTS):
        area = rng.uniform(lo, hi) * size * size
        aspect = rng.uniform(0.55, 1.0)
        a = math.sqrt(area / (math.pi * aspect))
        b = aspect * a
        phi = rng.uniform(0.0, math.pi)
        cx, cy = rng.uniform(0.15 * size, 0.85 * size, size=2)
        c, s = math.cos(phi), math.sin(phi)
        u = (xs - cx) * c + (ys - cy) * s
        v = -(xs - cx) * s + (ys - cy) * c
        rho2 = (u / a) ** 2 + (v / b) ** 2
        mask = rho2 <= 1.0
        frac = mask.mean()
        if mask.any() and lo <= frac <= hi:
            return mask, rho2
    raise RuntimeError(f"no polyp within area range {area_range} after {MAX_ATTEMPTS} attempts")


def generate_frame(config: SynthConfig, frame_index: int) -> tuple[Image, BinaryMask]:
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(frame_index)]))
    size = config.size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    half = (size - 1) / 2.0
    r2 = ((xs - half) ** 2 + (ys - half) ** 2) / (2.0 * half * half)

    tissue = np.array([0.72, 0.40, 0.34]) + rng.uniform(-0.06, 0.06, size=3)
    vignette = 1.0 - rng.uniform(0.45, 0.65) * r2
    shade = 1.0 + 0.22 * value_noise(rng, size)
    tint = 0.04 * value_noise(rng, size)
    image = tissue[None, None, :] * (vignette * shade)[:, :, None] + tint[:, :, None]

    mask, rho2 = _draw_ellipse(rng, size, config.polyp_area_range)
    boost = np.array([0.26, 0.07, 0.03]) * rng.uniform(0.8, 1.2)
    falloff = np.where(mask, 0.5 + 0.5 * (1.0 - np.clip(rho2, 0.0, 1.0)), 0.0)
    image = image + falloff[:, :, None] * boost[None, None, :]

    if rng.random() < config.highlight_prob:
        hx, hy = rng.uniform(0, size, size=2)
        sigma = rng.uniform(0.8, 1.8)
        blob = np.exp(-((xs - hx) ** 2 + (ys - hy) ** 2) / (2 * sigma * sigma))
        image = image + 0.7 * blob[:, :, None]

    image = image + config.noise_amplitude * rng.standard_normal(image.shape)
    return Image(np.clip(image, 0.0, 1.0)), BinaryMask(mask.astype(np.uint8))


def frame_name(index: int) -> str:
    return f"frame_{index:04d}"


def write_manifest(path: Path, pairs) -> None:
    Path(path).write_text("".join(f"{img}\t{msk}\n" for img, msk in pairs))


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Resolve ``image<TAB>mask`` lines relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>mask', got {len(cols)} columns")
        out.append((base / cols[0], base / cols[1]))
    return out


def generate_dataset(config: SynthConfig, out_dir) -> dict[str, list[tuple[str, str]]]:
    """Write all frames and the ``all``/``train``/``test`` manifests.

    Returns the manifest contents keyed by manifest name.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(config.count):
        image, mask = generate_frame(config, i)
        img_rel = f"images/{frame_name(i)}.ppm"
        msk_rel = f"masks/{frame_name(i)}.pgm"
        save_image(image, out / img_rel)
        save_mask(mask, out / msk_rel)
        pairs.append((img_rel, msk_rel))

    order = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5EED])).permutation(config.count)
    n_train = round(config.count * 2 / 3)
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    manifests = {
        "all": pairs,
        "train": [pairs[i] for i in train_idx],
        "test": [pairs[i] for i in test_idx],
    }
    for name, lines in manifests.items():
        write_manifest(out / f"{name}.txt", lines)
    return manifests
