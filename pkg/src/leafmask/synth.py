"""Synthetic top-view rosettes for desk-scale runs.

Leaves are ellipses radiating from a jittered plant centre. Each leaf is
clipped to an angular sector around its axis; ``overlap`` widens the sectors
so neighbouring leaves can occlude each other (later leaves are drawn on top).
With ``overlap=0`` the sectors partition the plane and the full leaf shapes
are pairwise disjoint.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .assembly import Box
from .errors import ConfigError

FEATURE_STRIDE = 2
FEATURE_NAMES = ("foreground", "edges", "x", "y", "cos_angle", "sin_angle")


@dataclass(frozen=True)
class Rosette:
    labels: np.ndarray  # (H, W) int64, 0 = background, leaves 1..n
    boxes: list  # tight Box per leaf id, in pixel units, ordered by id
    features: np.ndarray  # (len(FEATURE_NAMES), H / 2, W / 2) float32
    leaf_masks: np.ndarray  # (n, H, W) bool, unoccluded leaf shapes

    @property
    def n_leaves(self):
        return len(self.boxes)


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _leaf_masks(rng, n_leaves, size, overlap):
    cy, cx = size / 2 + rng.uniform(-0.05, 0.05, size=2) * size
    step = 2 * math.pi / n_leaves
    base = rng.uniform(0, 2 * math.pi)
    angles = base + step * np.arange(n_leaves) + rng.uniform(-0.15, 0.15, n_leaves) * step
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    pixel_angle = np.arctan2(dy, dx)

    masks = np.zeros((n_leaves, size, size), dtype=bool)
    for i, theta in enumerate(angles):
        length = rng.uniform(0.28, 0.42) * size
        a = length / 2
        b = a * rng.uniform(0.35, 0.55)
        ex, ey = cx + (a + 1) * math.cos(theta), cy + (a + 1) * math.sin(theta)
        u = (xx - ex) * math.cos(theta) + (yy - ey) * math.sin(theta)
        v = -(xx - ex) * math.sin(theta) + (yy - ey) * math.cos(theta)
        shape = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if n_leaves > 1:
            prev_gap = ((theta - angles[i - 1]) % (2 * math.pi)) / 2
            next_gap = ((angles[(i + 1) % n_leaves] - theta) % (2 * math.pi)) / 2
            rel = _wrap(pixel_angle - theta)
            shape &= (rel >= -prev_gap * (1 + overlap)) & (rel < next_gap * (1 + overlap))
        masks[i] = shape
    return masks, (cy, cx)


def _features(labels, center, rng, noise):
    size = labels.shape[0]
    fg = (labels > 0).astype(np.float64)
    edges = np.zeros_like(fg)
    edges[:, 1:] += labels[:, 1:] != labels[:, :-1]
    edges[1:, :] += labels[1:, :] != labels[:-1, :]
    edges = np.minimum(edges, 1.0)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    ang = np.arctan2(yy - center[0], xx - center[1])
    maps = [
        ndimage.gaussian_filter(fg, 1.0),
        ndimage.gaussian_filter(edges, 1.0),
        xx / size - 0.5,
        yy / size - 0.5,
        ndimage.gaussian_filter(np.cos(ang) * fg, 1.0),
        ndimage.gaussian_filter(np.sin(ang) * fg, 1.0),
    ]
    s = FEATURE_STRIDE
    stacked = np.stack(maps).reshape(len(maps), size // s, s, size // s, s).mean(axis=(2, 4))
    stacked += rng.normal(0.0, noise, stacked.shape)
    return stacked.astype(np.float32)


def synth_rosette(seed, n_leaves=5, size=64, overlap=0.2, noise=0.05):
    """Deterministic synthetic rosette with labels, tight boxes and features."""
    if n_leaves < 1:
        raise ConfigError(f"n_leaves must be >= 1, got {n_leaves}")
    if not 0 <= overlap <= 0.9:
        raise ConfigError(f"overlap must lie in [0, 0.9], got {overlap}")
    if size < 8 or size % FEATURE_STRIDE:
        raise ConfigError(f"image size must be an even number >= 8, got {size}")
    rng = np.random.default_rng(seed)
    masks, center = _leaf_masks(rng, n_leaves, size, overlap)
    labels = np.zeros((size, size), dtype=np.int64)
    for i, m in enumerate(masks):
        labels[m] = i + 1
    boxes = []
    for i in range(n_leaves):
        ys, xs = np.nonzero(labels == i + 1)
        if len(ys) == 0:
            raise ConfigError(f"leaf {i + 1} is not visible; use fewer leaves or a larger image")
        boxes.append(Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))
    return Rosette(labels=labels, boxes=boxes, features=_features(labels, center, rng, noise),
                   leaf_masks=masks)
