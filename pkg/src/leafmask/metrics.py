"""Dice and BestDice over instance label images (0 = background)."""

import math

import numpy as np

from .errors import ShapeError, UndefinedMetricError


def dice(a, b):
    """2|a&b| / (|a|+|b|); 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"dice: mask shapes differ, {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2 * int(np.logical_and(a, b).sum()) / total


def _overlaps(pred, gt):
    """Instance ids and pixel counts, plus the gt x pred intersection table."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"label images differ in size: {pred.shape} vs {gt.shape}")
    gt_ids, gt_inv = np.unique(gt.ravel(), return_inverse=True)
    pr_ids, pr_inv = np.unique(pred.ravel(), return_inverse=True)
    table = np.zeros((len(gt_ids), len(pr_ids)), dtype=np.int64)
    np.add.at(table, (gt_inv, pr_inv), 1)
    gt_sizes = table.sum(axis=1)
    pr_sizes = table.sum(axis=0)
    gt_keep = gt_ids != 0
    pr_keep = pr_ids != 0
    return (gt_ids[gt_keep], gt_sizes[gt_keep], pr_ids[pr_keep], pr_sizes[pr_keep],
            table[np.ix_(gt_keep, pr_keep)])


def best_dice_report(pred, gt):
    """Per-gt-instance best match and the BestDice percentage."""
    gt_ids, gt_sizes, pr_ids, pr_sizes, inter = _overlaps(pred, gt)
    if len(gt_ids) == 0:
        raise UndefinedMetricError("ground truth has no instances; BestDice is undefined")
    matches = []
    best = []
    for i, gid in enumerate(gt_ids):
        top, top_id = 0.0, None
        for j, pid in enumerate(pr_ids):
            d = 2 * int(inter[i, j]) / (int(gt_sizes[i]) + int(pr_sizes[j]))
            if d > top:
                top, top_id = d, int(pid)
        best.append(top)
        matches.append({"gt_id": int(gid), "best_pred_id": top_id, "dice": top})
    # fsum is exactly rounded, so the score does not depend on instance order
    score = 100.0 * math.fsum(best) / len(best)
    return {"score": score, "n_gt": len(gt_ids), "n_pred": len(pr_ids), "matches": matches}


def best_dice(pred, gt):
    """Mean over gt instances of the best Dice with any predicted instance, x100."""
    return best_dice_report(pred, gt)["score"]


def symmetric_best_dice(pred, gt):
    return min(best_dice(pred, gt), best_dice(gt, pred))
