"""Test-phase refinement of a probability map: Otsu binarization, then
keep the largest connected component."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import BinaryMask, ProbMap

__all__ = [
    "Labeling",
    "otsu_histogram",
    "otsu_threshold",
    "binarize",
    "connected_components",
    "largest_component",
    "postprocess",
]


@dataclass(frozen=True, eq=False)
class Labeling:
    labels: np.ndarray
    component_sizes: dict[int, int]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def count(self) -> int:
        return len(self.component_sizes)


def otsu_histogram(values: np.ndarray, bins: int = 256) -> np.ndarray:
    """Counts over right-closed bins: bin ``k`` holds ``(k/bins, (k+1)/bins]``,
    with 0 falling in bin 0."""
    v = np.asarray(values, dtype=np.float64).ravel()
    idx = np.clip(np.ceil(v * bins).astype(np.int64) - 1, 0, bins - 1)
    return np.bincount(idx, minlength=bins)


def otsu_threshold(prob_map: ProbMap, bins: int = 256) -> float:
    """Bin upper edge maximizing the between-class variance.

    The class at or below the threshold is bins ``0..k``. Variances are
    compared exactly in integer arithmetic; ties go to the smallest
    threshold. When no split has positive variance the result is 0.5.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    data = prob_map.data if isinstance(prob_map, ProbMap) else np.asarray(prob_map)
    if data.size == 0:
        raise ValueError("empty probability map")
    hist = otsu_histogram(data, bins)
    total = int(hist.sum())
    total_mass = int((hist * np.arange(bins)).sum())

    # sigma_b^2 * N^2 = (S0*n1 - S1*n0)^2 / (n0*n1), bin index as the value
    best_num, best_den, best_k = 0, 1, None
    n0 = s0 = 0
    for k in range(bins - 1):
        n0 += int(hist[k])
        s0 += k * int(hist[k])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        diff = s0 * n1 - (total_mass - s0) * n0
        num, den = diff * diff, n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_k = num, den, k
    if best_k is None:
        return 0.5
    return (best_k + 1) / bins


def binarize(prob_map: ProbMap, t: float) -> BinaryMask:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")
    return BinaryMask((prob_map.data > t).astype(np.uint8))


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def connected_components(mask: BinaryMask, connectivity: int = 8) -> Labeling:
    """Two-pass union-find labeling.

    Labels run 1..K in raster order of each component's first pixel.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    fg = mask.data.astype(bool)
    height, width = fg.shape
    provisional = np.zeros((height, width), dtype=np.int64)
    parent = [0]
    if connectivity == 8:
        offsets = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
    else:
        offsets = ((-1, 0), (0, -1))

    rows = fg.tolist()
    prov = provisional.tolist()
    for y in range(height):
        row = rows[y]
        for x in range(width):
            if not row[x]:
                continue
            neighbours = []
            for dy, dx in offsets:
                ny, nx = y + dy, x + dx
                if 0 <= ny and 0 <= nx < width and prov[ny][nx]:
                    neighbours.append(prov[ny][nx])
            if not neighbours:
                parent.append(len(parent))
                prov[y][x] = len(parent) - 1
                continue
            first = _find(parent, neighbours[0])
            for other in neighbours[1:]:
                root = _find(parent, other)
                if root != first:
                    lo, hi = min(root, first), max(root, first)
                    parent[hi] = lo
                    first = lo
            prov[y][x] = first

    provisional = np.array(prov, dtype=np.int64).reshape(height, width)
    roots = np.array([_find(parent, i) for i in range(len(parent))], dtype=np.int64)
    resolved = roots[provisional]

    # renumber in raster order of first occurrence
    flat = resolved.ravel()
    uniq, first_idx = np.unique(flat, return_index=True)
    keep = uniq != 0
    uniq, first_idx = uniq[keep], first_idx[keep]
    order = np.argsort(first_idx, kind="stable")
    lookup = np.zeros(len(parent), dtype=np.int64)
    lookup[uniq[order]] = np.arange(1, len(order) + 1)
    labels = lookup[resolved]
    sizes = np.bincount(labels.ravel(), minlength=len(order) + 1)
    return Labeling(labels, {i: int(sizes[i]) for i in range(1, len(order) + 1)})


def largest_component(labeling: Labeling) -> BinaryMask:
    """Mask of the biggest component; ties keep the smallest label."""
    if not labeling.component_sizes:
        return BinaryMask(np.zeros(labeling.labels.shape, dtype=np.uint8))
    best = max(labeling.component_sizes, key=lambda k: (labeling.component_sizes[k], -k))
    return BinaryMask((labeling.labels == best).astype(np.uint8))


def postprocess(prob_map: ProbMap, bins: int = 256, connectivity: int = 8) -> BinaryMask:
    t = otsu_threshold(prob_map, bins)
    return largest_component(connected_components(binarize(prob_map, t), connectivity))
