"""Score-map evaluation: boxes from heatmaps, IoU, and threshold-swept
localization accuracy.

A score map is min-max normalized, binarized at a threshold tau, split into
4-connected components, and each component contributes its tight bounding
box.  A sample counts as correct at (tau, delta) when the best IoU between
any estimated box and any ground-truth box reaches delta.  The headline
metric sweeps tau over an even grid in [0, 1), takes the best fraction per
IoU criterion delta, and averages over delta in {0.3, 0.5, 0.7}.

Boxes use half-open integer pixel coordinates: x0 <= x < x1, y0 <= y < y1,
with x along columns and y along rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError
from .tensor import Tensor

DEFAULT_DELTAS = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box over pixels x0 <= x < x1, y0 <= y < y1."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise ValueError(f"box must have positive area, got {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class ScoreMap:
    image_id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ShapeError(f"score map must be 2-D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError(f"score map {self.image_id!r} has non-finite values")


@dataclass
class EvalConfig:
    iou_deltas: tuple = DEFAULT_DELTAS
    n_thresholds: int = 100
    fixed_threshold: Optional[float] = None

    def __post_init__(self):
        self.iou_deltas = tuple(sorted(float(d) for d in set(self.iou_deltas)))
        if not self.iou_deltas or any(not 0 < d <= 1 for d in self.iou_deltas):
            raise ValueError(f"iou deltas must lie in (0, 1], got {self.iou_deltas}")
        if self.n_thresholds < 2:
            raise ValueError(f"need at least 2 thresholds, got {self.n_thresholds}")


BoxSets = Dict[str, List[Box]]


def compute_cam(features, classifier_weights, class_k: int, image_id: str = "") -> ScoreMap:
    """Class activation map: per-pixel weighted channel sum for one class."""
    feat = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    w = classifier_weights.data if isinstance(classifier_weights, Tensor) \
        else np.asarray(classifier_weights, dtype=np.float64)
    if feat.ndim != 3 or w.ndim != 2 or w.shape[1] != feat.shape[0]:
        raise ShapeError(f"features {feat.shape} incompatible with weights {w.shape}")
    if not 0 <= class_k < w.shape[0]:
        raise ValueError(f"class {class_k} out of range for {w.shape[0]} classes")
    return ScoreMap(image_id, np.tensordot(w[class_k], feat, axes=1))


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; constant maps collapse to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def boxes_at_threshold(values: np.ndarray, tau: float) -> List[Box]:
    """Tight boxes of the 4-connected components of 1[values >= tau]."""
    mask = np.asarray(values) >= tau
    if not mask.any():
        return []
    labels, n = ndimage.label(mask)  # default structure = 4-connectivity
    boxes = []
    for sl in ndimage.find_objects(labels, max_label=n):
        if sl is not None:
            boxes.append(Box(x0=sl[1].start, y0=sl[0].start,
                             x1=sl[1].stop, y1=sl[0].stop))
    return boxes


def iou(a: Box, b: Box) -> float:
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(ix, 0) * max(iy, 0)
    union = a.area + b.area - inter
    return inter / union


def threshold_grid(n_thresholds: int) -> np.ndarray:
    """n evenly spaced thresholds in [0, 1): i / n for i = 0 .. n-1."""
    return np.arange(int(n_thresholds), dtype=np.float64) / int(n_thresholds)


def _require_gt(image_id: str, gt: BoxSets) -> List[Box]:
    boxes = gt.get(image_id)
    if not boxes:
        raise DataError(f"no ground-truth boxes for image id {image_id!r}")
    return boxes


def _best_iou(est: Sequence[Box], gt_boxes: Sequence[Box]) -> float:
    best = 0.0
    for e in est:
        for g in gt_boxes:
            v = iou(e, g)
            if v > best:
                best = v
    return best


def best_iou_matrix(maps: Sequence[ScoreMap], gt: BoxSets,
                    taus: np.ndarray) -> np.ndarray:
    """[n_maps, n_taus] best IoU between estimated and GT boxes.

    Shared by every delta criterion so the component labeling runs once per
    (map, tau) pair.
    """
    out = np.zeros((len(maps), len(taus)), dtype=np.float64)
    for i, smap in enumerate(maps):
        gt_boxes = _require_gt(smap.image_id, gt)
        norm = normalize(smap.values)
        for j, tau in enumerate(taus):
            out[i, j] = _best_iou(boxes_at_threshold(norm, tau), gt_boxes)
    return out


def box_acc(maps: Sequence[ScoreMap], gt: BoxSets, tau: float, delta: float) -> float:
    """Fraction of samples whose best estimated-vs-GT IoU at tau reaches delta."""
    correct = 0
    for smap in maps:
        gt_boxes = _require_gt(smap.image_id, gt)
        est = boxes_at_threshold(normalize(smap.values), tau)
        if _best_iou(est, gt_boxes) >= delta:
            correct += 1
    return correct / len(maps)


def max_box_acc(maps: Sequence[ScoreMap], gt: BoxSets, delta: float,
                n_thresholds: int = 100) -> tuple[float, float]:
    """(best fraction, smallest tau attaining it) over the threshold grid."""
    taus = threshold_grid(n_thresholds)
    best = best_iou_matrix(maps, gt, taus)
    accs = (best >= delta).mean(axis=0)
    j = int(np.argmax(accs))
    return float(accs[j]), float(taus[j])


def max_box_acc_v2(maps: Sequence[ScoreMap], gt: BoxSets,
                   deltas: Sequence[float] = DEFAULT_DELTAS,
                   n_thresholds: int = 100) -> tuple[float, dict]:
    """Mean of the per-delta best fractions, plus per-delta details.

    Returns (mean, {delta: (fraction, best_tau)}).
    """
    deltas = tuple(deltas)
    if not deltas:
        raise ValueError("need at least one IoU delta")
    taus = threshold_grid(n_thresholds)
    best = best_iou_matrix(maps, gt, taus)
    per_delta = {}
    for d in deltas:
        accs = (best >= d).mean(axis=0)
        j = int(np.argmax(accs))
        per_delta[d] = (float(accs[j]), float(taus[j]))
    mean = float(np.mean([per_delta[d][0] for d in deltas]))
    return mean, per_delta


def largest_box(boxes: Sequence[Box]) -> Optional[Box]:
    return max(boxes, key=lambda b: b.area) if boxes else None


def top1_localization(pred_classes: Sequence[int], maps: Sequence[ScoreMap],
                      gt_classes: Sequence[int], gt: BoxSets,
                      fixed_threshold: float) -> float:
    """Fraction with the right class AND a box of IoU >= 0.5.

    The single estimate per sample is the largest-area component at the
    fixed threshold.
    """
    if not len(maps) or len(pred_classes) != len(maps) or len(gt_classes) != len(maps):
        raise ValueError("predictions, maps and labels must align")
    correct = 0
    for pred, smap, true in zip(pred_classes, maps, gt_classes):
        gt_boxes = _require_gt(smap.image_id, gt)
        if pred != true:
            continue
        est = largest_box(boxes_at_threshold(normalize(smap.values), fixed_threshold))
        if est is not None and max(iou(est, g) for g in gt_boxes) >= 0.5:
            correct += 1
    return correct / len(maps)


def top1_classification(pred_classes: Sequence[int], gt_classes: Sequence[int]) -> float:
    pred = np.asarray(pred_classes)
    true = np.asarray(gt_classes)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("predictions and labels must align and be non-empty")
    return float((pred == true).mean())


def choose_fixed_threshold(maps: Sequence[ScoreMap], gt: BoxSets,
                           n_thresholds: int = 100, delta: float = 0.5) -> float:
    """Smallest grid tau maximizing box_acc at the given delta.

    Meant to run on a held-out tuning split, mirroring how a fixed
    localization threshold is picked with a small fully-annotated set.
    """
    taus = threshold_grid(n_thresholds)
    best = best_iou_matrix(maps, gt, taus)
    accs = (best >= delta).mean(axis=0)
    return float(taus[int(np.argmax(accs))])
