"""Mask, semantic-auxiliary and point losses, and the multi-task total.

All BCE terms are mean-reduced and computed in logit space:
``max(l, 0) - l * t + log1p(exp(-|l|))``.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .tensor import sample_points_bilinear, sigmoid

SEM_WEIGHT = 0.3


def _check_binary(target, where):
    t = np.asarray(target)
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError(f"{where}: target must be binary")
    return t


def bce_with_logits(logits, target):
    """Mean binary cross-entropy and its gradient w.r.t. ``logits``."""
    l = np.asarray(logits)
    t = np.asarray(target, dtype=l.dtype)
    per = np.maximum(l, 0) - l * t + np.log1p(np.exp(-np.abs(l)))
    grad = (sigmoid(l) - t) / l.size
    return float(per.mean(dtype=np.float64)), grad.astype(l.dtype, copy=False)


def bce_mask_loss(pred_logits, target, return_grad=False):
    if pred_logits.shape != np.shape(target):
        raise ShapeError(f"mask loss: logits {pred_logits.shape} vs target {np.shape(target)}")
    loss, grad = bce_with_logits(pred_logits, _check_binary(target, "mask loss"))
    return (loss, grad) if return_grad else loss


def resize_nearest(mask, out_h, out_w):
    """Nearest-neighbour resize of a 2-D map under the half-pixel convention."""
    h, w = mask.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[ys[:, None], xs[None, :]]


def semantic_aux_loss(sem_logits, fg_target, return_grad=False):
    """Foreground-vs-background BCE. The target is nearest-resized to the
    logit resolution; the 0.3 weight is applied by ``total_loss``."""
    sem = np.asarray(sem_logits)
    if sem.ndim == 3:
        if sem.shape[0] != 1:
            raise ShapeError(f"semantic logits must be (1, H, W), got {sem.shape}")
        logits2d = sem[0]
    elif sem.ndim == 2:
        logits2d = sem
    else:
        raise ShapeError(f"semantic logits must be (1, H, W), got {sem.shape}")
    t = np.asarray(fg_target)
    if t.ndim == 3 and t.shape[0] == 1:
        t = t[0]
    if t.ndim != 2:
        raise ShapeError(f"semantic target must be 2-D, got {np.shape(fg_target)}")
    if t.shape != logits2d.shape:
        t = resize_nearest(t, *logits2d.shape)
    loss, grad = bce_with_logits(logits2d, _check_binary(t, "semantic loss"))
    return (loss, grad.reshape(sem.shape)) if return_grad else loss


def point_targets(gt_mask, points):
    """Ground truth at exact point coordinates (bilinear sample > 0.5)."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    return (sample_points_bilinear(gt[None, None], points.coords)[0, 0] > 0.5).astype(np.float64)


def point_loss(refined_point_logits, point_targets_, return_grad=False):
    logits = np.asarray(refined_point_logits)
    if logits.size == 0:
        raise ConfigError("point loss over an empty point set")
    if logits.shape != np.shape(point_targets_):
        raise ShapeError(f"point loss: {logits.shape} logits vs {np.shape(point_targets_)} targets")
    loss, grad = bce_with_logits(logits, _check_binary(point_targets_, "point loss"))
    return (loss, grad) if return_grad else loss


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_ctr: float
    l_loc: float
    l_mask: float
    l_sem: float
    l_points: float
    total: float

    def as_dict(self):
        return asdict(self)


def total_loss(l_cls, l_ctr, l_loc, l_mask, l_sem, l_points):
    """Multi-task total; the semantic auxiliary term carries weight 0.3."""
    parts = {"l_cls": l_cls, "l_ctr": l_ctr, "l_loc": l_loc, "l_mask": l_mask, "l_sem": l_sem,
             "l_points": l_points}
    for name, value in parts.items():
        if value is None or not math.isfinite(value) or value < 0:
            raise ValidationError(f"loss component {name} must be finite and >= 0, got {value}")
    total = l_cls + l_ctr + l_loc + l_mask + SEM_WEIGHT * l_sem + l_points
    return LossBreakdown(**{k: float(v) for k, v in parts.items()}, total=float(total))
