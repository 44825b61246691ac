"""Pixel confusion metrics, false positives per frame, and dataset reports.

Ratios of the form 0/0 are reported as 1.0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .imagecore import BinaryMask
from .postproc import connected_components

METRIC_NAMES = ("accuracy", "precision", "sensitivity", "specificity", "dice")
TABLE_HEADERS = ("Accuracy", "Precision", "Sensitivity", "Specificity", "Dice Score", "FPPF")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"dimension mismatch: pred {pred.data.shape} vs gt {gt.data.shape}")
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def frame_metrics(counts: ConfusionCounts) -> dict[str, float]:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    return {
        "accuracy": _ratio(tp + tn, counts.total),
        "precision": _ratio(tp, tp + fp),
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "dice": _ratio(2 * tp, 2 * tp + fp + fn),
    }


def false_positive_components(
    pred: BinaryMask, gt: BinaryMask, connectivity: int = 8, min_iou: float | None = None
) -> int:
    """Predicted components counted as false detections.

    By default a component is false iff it has no pixel in common with the
    ground truth. With ``min_iou`` set it is false iff its IoU with the
    ground-truth foreground is below ``min_iou``.
    """
    labeling = connected_components(pred, connectivity)
    g = gt.data.astype(bool)
    n_gt = int(g.sum())
    false = 0
    for label, size in labeling.component_sizes.items():
        comp = labeling.labels == label
        overlap = int(np.count_nonzero(comp & g))
        if min_iou is None:
            false += overlap == 0
        else:
            union = size + n_gt - overlap
            false += (overlap / union if union else 0.0) < min_iou
    return int(false)


def fppf(
    frames: Sequence[tuple[BinaryMask, BinaryMask]],
    connectivity: int = 8,
    min_iou: float | None = None,
) -> float:
    if not frames:
        raise ValueError("fppf needs at least one frame")
    total = sum(false_positive_components(p, g, connectivity, min_iou) for p, g in frames)
    return total / len(frames)


@dataclass
class FrameRecord:
    frame: str
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    dice: float
    false_positives: int = 0


@dataclass
class MetricsReport:
    per_frame: list[FrameRecord]
    macro: dict[str, float]
    micro: dict[str, float]
    fppf: float
    label: str = ""

    def records(self) -> list[dict]:
        """One JSON-ready dict per frame, then one aggregate record."""
        out = [dict(kind="frame", label=self.label, **asdict(r)) for r in self.per_frame]
        out.append(
            dict(kind="aggregate", label=self.label, frames=len(self.per_frame),
                 macro=self.macro, micro=self.micro, fppf=self.fppf)
        )
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def row(self, aggregate: str = "macro") -> list[float]:
        values = self.macro if aggregate == "macro" else self.micro
        return [values[m] for m in METRIC_NAMES] + [self.fppf]


def format_table(rows: Iterable[tuple[str, Sequence[float]]], title: str = "Method") -> str:
    """Aligned plain-text table in the column order Accuracy .. FPPF."""
    rows = list(rows)
    name_w = max([len(title)] + [len(name) for name, _ in rows])
    col_w = max(len(h) for h in TABLE_HEADERS)
    lines = [title.ljust(name_w) + "  " + "  ".join(h.rjust(col_w) for h in TABLE_HEADERS)]
    for name, values in rows:
        cells = [f"{v:.3f}" for v in values[:-1]] + [f"{values[-1]:.2f}"]
        lines.append(name.ljust(name_w) + "  " + "  ".join(c.rjust(col_w) for c in cells))
    return "\n".join(lines) + "\n"


def evaluate_dataset(
    pairs: Sequence[tuple[str, BinaryMask, BinaryMask]],
    connectivity: int = 8,
    min_iou: float | None = None,
    label: str = "",
) -> MetricsReport:
    """Evaluate ``(frame_id, pred, gt)`` triples."""
    if not pairs:
        raise ValueError("empty dataset")
    per_frame = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    false_total = 0
    for frame_id, pred, gt in pairs:
        counts = confusion(pred, gt)
        pooled = pooled + counts
        false = false_positive_components(pred, gt, connectivity, min_iou)
        false_total += false
        per_frame.append(FrameRecord(frame_id, **frame_metrics(counts), false_positives=false))
    macro = {m: float(np.mean([getattr(r, m) for r in per_frame])) for m in METRIC_NAMES}
    return MetricsReport(per_frame, macro, frame_metrics(pooled), false_total / len(pairs), label)
