"""Slow reference implementations used to cross-check the package."""
import itertools
import math

import numpy as np

FACES = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def brute_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred, bool).ravel().tolist(), np.asarray(gt, bool).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_boundary(mask):
    mask = np.asarray(mask, bool)
    pts = []
    for z, y, x in itertools.product(*(range(s) for s in mask.shape)):
        if not mask[z, y, x]:
            continue
        for dz, dy, dx in FACES:
            n = (z + dz, y + dy, x + dx)
            if not all(0 <= c < s for c, s in zip(n, mask.shape)) or not mask[n]:
                pts.append((z, y, x))
                break
    return pts


def brute_asd(pred, gt, spacing=(1.0, 1.0, 1.0)):
    bx, by = brute_boundary(pred), brute_boundary(gt)
    if not bx and not by:
        return 0.0
    if not bx or not by:
        return math.nan

    def dmin(p, others):
        return min(math.sqrt(sum(((a - b) * s) ** 2 for a, b, s in zip(p, q, spacing)))
                   for q in others)

    total = sum(dmin(p, by) for p in bx) + sum(dmin(q, bx) for q in by)
    return total / (len(bx) + len(by))


def safe_ratio(num, den, tp, fp, fn):
    if den == 0:
        return 1.0 if tp + fp + fn == 0 else 0.0
    return num / den


def brute_scores(pred, gt):
    tp, fp, fn, _ = brute_counts(pred, gt)
    return {"dice": safe_ratio(2 * tp, 2 * tp + fp + fn, tp, fp, fn),
            "iou": safe_ratio(tp, tp + fp + fn, tp, fp, fn),
            "pre": safe_ratio(tp, tp + fp, tp, fp, fn),
            "rec": safe_ratio(tp, tp + fn, tp, fp, fn)}
