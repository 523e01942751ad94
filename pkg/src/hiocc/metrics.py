"""Semantic scene completion metrics: occupancy IoU, per-class IoU, mIoU.

A confusion matrix (rows ground truth, cols prediction) is accumulated
over valid voxels only; accumulation over frames is plain integer
addition, so parallel evaluation of disjoint frame sets is exact and
order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel_grid import FREE_CLASS, SemanticGrid


@dataclass
class ConfusionMatrix:
    """Integer class-confusion counts, rows GT and cols prediction."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if (
            self.counts.ndim != 2
            or self.counts.shape[0] != self.counts.shape[1]
        ):
            raise ValueError(f"counts must be square, got {self.counts.shape}")
        if self.counts.min(initial=0) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        if num_classes < 2:
            raise ValueError("need at least free + one semantic class")
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot add matrices of different class counts")
        return ConfusionMatrix(counts=self.counts + other.counts)


def accumulate(
    pred: SemanticGrid, gt: SemanticGrid, into: ConfusionMatrix | None = None
) -> ConfusionMatrix:
    """Count (gt, pred) label pairs over gt-valid voxels.

    Both grids must share the spec and class count.  When `into` is given
    the counts are added to it in place (and it is also returned).
    """
    if pred.spec != gt.spec:
        raise ValueError(f"grid specs differ: {pred.spec} vs {gt.spec}")
    if pred.num_classes != gt.num_classes:
        raise ValueError("class counts differ")
    c = gt.num_classes
    sel = gt.valid
    pairs = gt.labels[sel].astype(np.int64) * c + pred.labels[sel]
    counts = np.bincount(pairs, minlength=c * c).reshape(c, c)
    if into is None:
        return ConfusionMatrix(counts=counts)
    if into.num_classes != c:
        raise ValueError("accumulator class count mismatch")
    into.counts += counts
    return into


def ssc_metrics(cm: ConfusionMatrix) -> dict:
    """Scene-completion scores from a confusion matrix.

    Occupancy IoU collapses all non-free classes to "occupied"; per-class
    IoU is TP / (TP + FP + FN) for semantic classes 1..C-1, with classes
    absent from both prediction and ground truth reported as None and
    excluded from mIoU.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    c = cm.num_classes
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp

    occ = counts[1:, 1:].sum()  # occupied predicted occupied
    occ_fp = counts[FREE_CLASS, 1:].sum()
    occ_fn = counts[1:, FREE_CLASS].sum()
    occ_union = occ + occ_fp + occ_fn
    iou_occupancy = float(occ / occ_union) if occ_union > 0 else None

    per_class: list[float | None] = []
    present = []
    for k in range(1, c):
        union = tp[k] + fp[k] + fn[k]
        if union == 0:
            per_class.append(None)
        else:
            iou = float(tp[k] / union)
            per_class.append(iou)
            present.append(iou)
    if not present:
        miou = None
    else:
        miou = float(np.mean(present))
    return {
        "iou_occupancy": iou_occupancy,
        "per_class_iou": per_class,
        "miou": miou,
        "total_voxels": cm.total,
    }


def format_report(
    metrics: dict, class_names: list[str] | None = None
) -> str:
    """Aligned text table of an ssc_metrics dict."""
    per_class = metrics["per_class_iou"]
    if class_names is None:
        names = [f"class_{k}" for k in range(1, len(per_class) + 1)]
    else:
        names = list(class_names[1 : len(per_class) + 1])
        names += [f"class_{k}" for k in range(len(names) + 1, len(per_class) + 1)]
    width = max([len(n) for n in names] + [len("occupancy IoU")])

    def fmt(v: float | None) -> str:
        return "   --" if v is None else f"{v:.4f}"

    lines = [f"{'occupancy IoU':<{width}}  {fmt(metrics['iou_occupancy'])}"]
    for name, iou in zip(names, per_class):
        lines.append(f"{name:<{width}}  {fmt(iou)}")
    lines.append(f"{'mIoU':<{width}}  {fmt(metrics['miou'])}")
    lines.append(f"{'voxels':<{width}}  {metrics['total_voxels']}")
    return "\n".join(lines)
