"""Overlap and surface-distance metrics, computed one class vs. rest."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume3D

FACE_CONNECTED = ndimage.generate_binary_structure(3, 1)
CLASS_NAMES = {1: "lumen", 2: "wall"}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def _ratio(self, num: int, den: int) -> float:
        # 0/0: perfect agreement if neither mask has any voxel, else a miss
        if den == 0:
            return 1.0 if self.tp + self.fp + self.fn == 0 else 0.0
        return num / den

    @property
    def dice(self) -> float:
        return self._ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def iou(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp + self.fn)

    @property
    def precision(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)


def _labels(v):
    return v.data if isinstance(v, (LabelVolume, Volume3D)) else np.asarray(v)


def confusion(pred, gt, class_id: int | None = None) -> ConfusionCounts:
    """Counts for ``class_id`` (or for boolean masks when ``class_id`` is None)."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs gt {g.shape}")
    if class_id is not None:
        p, g = p == class_id, g == class_id
    else:
        p, g = p.astype(bool), g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face neighbour that is background or outside."""
    mask = mask.astype(bool)
    if mask.ndim != 3:
        raise ValueError("boundary expects a 3D mask")
    interior = ndimage.binary_erosion(mask, structure=FACE_CONNECTED, border_value=0)
    return mask & ~interior


def asd(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric average surface distance in mm.

    0 when both masks are empty, NaN (undefined) when exactly one is.
    """
    x = np.asarray(pred_mask, dtype=bool)
    y = np.asarray(gt_mask, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    bx, by = boundary(x), boundary(y)
    nx, ny = int(bx.sum()), int(by.sum())
    if nx == 0 and ny == 0:
        return 0.0
    if nx == 0 or ny == 0:
        return math.nan
    dist_to_y = ndimage.distance_transform_edt(~by, sampling=spacing)
    dist_to_x = ndimage.distance_transform_edt(~bx, sampling=spacing)
    return float((dist_to_y[bx].sum() + dist_to_x[by].sum()) / (nx + ny))


def class_metrics(pred, gt, class_id: int, spacing=(1.0, 1.0, 1.0)) -> dict:
    p, g = _labels(pred), _labels(gt)
    c = confusion(p, g, class_id)
    d = asd(p == class_id, g == class_id, spacing)
    return {"dice": c.dice, "iou": c.iou, "pre": c.precision, "rec": c.recall,
            "asd_mm": d, "asd_undefined": math.isnan(d),
            "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
