"""Uncertainty-driven point selection, the point-wise predictor, and iterative
2x subdivision refinement of instance mask logits.

Point coordinates are (x, y) in the pixel-index frame of the mask they refer
to: integer coordinates are pixel centres. Mapping into another grid (e.g. the
fine feature map) is proportional under the half-pixel convention.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .params import init_conv
from .tensor import (
    DTYPE,
    concat_channels_backward,
    concat_channels_forward,
    conv2d_backward,
    conv2d_forward,
    elementwise_backward,
    elementwise_forward,
    resize_bilinear,
    sample_points_bilinear,
    sample_points_bilinear_backward,
    sample_points_bilinear_forward,
)

UNCERTAIN = "uncertain"
RANDOM = "random"


@dataclass(frozen=True)
class RefineConfig:
    beta: float = 3.0
    alpha: float = 0.75
    n_points: int = 784
    steps: int = 3
    n_layers: int = 3
    hidden: int = 256

    def __post_init__(self):
        if not self.beta > 1:
            raise ConfigError(f"oversampling rate beta must be > 1, got {self.beta}")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"importance rate alpha must be in (0, 1], got {self.alpha}")
        if self.n_points < 1:
            raise ConfigError(f"n_points must be >= 1, got {self.n_points}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.n_layers < 1 or self.hidden < 1:
            raise ConfigError("predictor needs n_layers >= 1 and hidden >= 1")

    @property
    def n_candidates(self):
        # tolerance guards against products like 3 * 0.1 landing just above an integer
        return math.ceil(self.beta * self.n_points - 1e-9)

    @property
    def n_important(self):
        return math.floor(self.alpha * self.n_points + 1e-9)

    @classmethod
    def from_dict(cls, d):
        fields = {"beta": float, "alpha": float, "n_points": int, "steps": int, "n_layers": int, "hidden": int}
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigError(f"unknown refine config keys: {sorted(unknown)}")
        return cls(**{k: fields[k](v) for k, v in d.items()})


@dataclass(frozen=True)
class PointSet:
    coords: np.ndarray  # (P, 2) float64, columns x, y
    kinds: tuple  # UNCERTAIN or RANDOM per point

    def __len__(self):
        return len(self.kinds)

    def subset(self, kind):
        mask = np.array([k == kind for k in self.kinds], dtype=bool)
        return self.coords[mask]


def uncertainty(logits):
    """``-|sigmoid(l) - 0.5|``; 0 where the probability is exactly 0.5."""
    logits = np.asarray(logits)
    # sigmoid(l) - 0.5 == tanh(l / 2) / 2, without the cancellation near 0
    return (-0.5 * np.abs(np.tanh(logits / 2))).astype(logits.dtype, copy=False)


def _ranking(u):
    # most uncertain first; ties keep the lowest index
    return np.argsort(-u, kind="stable")


def draw_candidates(shape, count, rng):
    """``count`` distinct uniform (x, y) points over an (H, W) map, spanning
    the full pixel area [-0.5, W-0.5] x [-0.5, H-0.5]."""
    h, w = shape
    low, high = np.array([-0.5, -0.5]), np.array([w - 0.5, h - 0.5])
    cand = rng.uniform(low, high, size=(count, 2))
    while True:
        _, first = np.unique(cand, axis=0, return_index=True)
        if len(first) == count:
            return cand
        dup = np.setdiff1d(np.arange(count), first)
        cand[dup] = rng.uniform(low, high, size=(len(dup), 2))


def sample_points_train(logits, cfg, seed):
    """Training-time selection: draw ceil(beta*N) uniform candidates, keep the
    floor(alpha*N) most uncertain, fill to N at random from the rest."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (H, W), got {logits.shape}")
    rng = np.random.default_rng(seed)
    n = cfg.n_points
    n_imp = cfg.n_important
    cand = draw_candidates(logits.shape, cfg.n_candidates, rng)

    u_map = uncertainty(logits.astype(np.float64))
    u = sample_points_bilinear(u_map[None, None], cand)[0, 0]
    order = _ranking(u)
    chosen = order[:n_imp]
    rest = np.sort(order[n_imp:])
    fill = rng.choice(rest, size=n - n_imp, replace=False) if n > n_imp else np.empty(0, dtype=np.int64)
    idx = np.concatenate([chosen, fill]).astype(np.int64)
    kinds = (UNCERTAIN,) * n_imp + (RANDOM,) * (n - n_imp)
    return PointSet(coords=cand[idx], kinds=kinds)


def select_points_inference(logits, n):
    """The ``n`` most uncertain grid points; ties go to the lowest row-major index."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (H, W), got {logits.shape}")
    h, w = logits.shape
    if not 1 <= n <= h * w:
        raise ConfigError(f"cannot select {n} points from a {h}x{w} grid")
    flat = _ranking(uncertainty(logits.astype(np.float64)).ravel())[:n]
    coords = np.stack([flat % w, flat // w], axis=1).astype(np.float64)
    return PointSet(coords=coords, kinds=(UNCERTAIN,) * n)


# ---------------------------------------------------------------------------
# point predictor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointPredictorParams:
    layers: tuple  # 1x1 ConvParams; coarse logit appended to every layer's input

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("point predictor needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.weight.shape[2:] != (1, 1):
                raise ShapeError(f"point predictor layer {i} must be 1x1")
            if i > 0 and layer.in_channels != self.layers[i - 1].out_channels + 1:
                raise ShapeError(f"point predictor layer {i} input width must be previous width + 1")
        if self.layers[-1].out_channels != 1:
            raise ShapeError("point predictor must output one logit per point")

    @property
    def fine_channels(self):
        return self.layers[0].in_channels - 1


def init_point_predictor(fine_channels, hidden=256, n_layers=3, rng=None, dtype=DTYPE, zero=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = [fine_channels] + [hidden] * (n_layers - 1) + [1]
    layers = tuple(init_conv(widths[i + 1], widths[i] + 1, 1, rng, dtype, zero) for i in range(n_layers))
    return PointPredictorParams(layers=layers)


def map_points(coords, src_hw, dst_hw):
    """Proportional half-pixel mapping of (x, y) points between grid sizes."""
    sy, sx = dst_hw[0] / src_hw[0], dst_hw[1] / src_hw[1]
    return (coords + 0.5) * np.array([sx, sy]) - 0.5


def point_predict_forward(fine_features, coarse_logits, points, p):
    if fine_features.ndim != 3 or fine_features.shape[0] != p.fine_channels:
        raise ShapeError(
            f"fine features must be ({p.fine_channels}, Hf, Wf), got {fine_features.shape}"
        )
    if coarse_logits.ndim != 2:
        raise ShapeError(f"coarse logits must be (H, W), got {coarse_logits.shape}")
    coords = np.asarray(points.coords, dtype=np.float64)
    fine_pts = map_points(coords, coarse_logits.shape, fine_features.shape[1:])
    f, cf = sample_points_bilinear_forward(fine_features[None], fine_pts)
    c, cc = sample_points_bilinear_forward(coarse_logits[None, None], coords)
    h = f[:, :, None, :]  # (1, C, 1, P): points laid out along the width axis
    coarse_col = c[:, :, None, :]
    layers = []
    for i, layer in enumerate(p.layers):
        inp, ccat = concat_channels_forward([h, coarse_col.astype(h.dtype, copy=False)])
        h, cconv = conv2d_forward(inp, layer)
        cr = None
        if i < len(p.layers) - 1:
            h, cr = elementwise_forward("relu_neg_slope", h, slope=0.0)
        layers.append((ccat, cconv, cr))
    return h[0, 0, 0], {"f": cf, "c": cc, "layers": layers}


def point_predict_backward(dout, cache):
    """Returns (d_fine_features, d_coarse_logits, grads)."""
    dh = dout[None, None, None, :]
    d_coarse_col = 0
    grads = {}
    for i in reversed(range(len(cache["layers"]))):
        ccat, cconv, cr = cache["layers"][i]
        if cr is not None:
            (dh,) = elementwise_backward(dh, cr)
        dinp, dw, db = conv2d_backward(dh, cconv)
        grads[f"layers.{i}.weight"] = dw
        grads[f"layers.{i}.bias"] = db
        dh, dc = concat_channels_backward(dinp, ccat)
        d_coarse_col = d_coarse_col + dc
    d_fine = sample_points_bilinear_backward(dh[:, :, 0, :], cache["f"])[0]
    d_coarse = sample_points_bilinear_backward(d_coarse_col[:, :, 0, :], cache["c"])[0, 0]
    return d_fine, d_coarse, grads


def point_predict(fine_features, coarse_logits, points, p):
    """Refined logit for every point, shape (P,)."""
    return point_predict_forward(fine_features, coarse_logits, points, p)[0]


# ---------------------------------------------------------------------------
# subdivision
# ---------------------------------------------------------------------------


def refine_mask_trace(coarse_logits, fine_features, cfg, params):
    """Like ``refine_mask`` but also returns the PointSet replaced at each step."""
    if coarse_logits.ndim != 2:
        raise ShapeError(f"coarse logits must be (H, W), got {coarse_logits.shape}")
    m = coarse_logits
    trace = []
    for _ in range(cfg.steps):
        h, w = m.shape
        m = resize_bilinear(m[None, None], 2 * h, 2 * w)[0, 0]
        pts = select_points_inference(m, min(cfg.n_points, m.size))
        vals = point_predict(fine_features, m, pts, params)
        xs, ys = pts.coords[:, 0].astype(np.int64), pts.coords[:, 1].astype(np.int64)
        m = m.copy()
        m[ys, xs] = vals
        trace.append(pts)
    return m, trace


def refine_mask(coarse_logits, fine_features, cfg, params):
    """Upsample 2x ``cfg.steps`` times, re-predicting the N most uncertain grid
    points after each upsample. Output is (H * 2**steps, W * 2**steps)."""
    return refine_mask_trace(coarse_logits, fine_features, cfg, params)[0]


def binarize(logits):
    """Foreground where sigmoid(l) > 0.5, i.e. l > 0 (a tie is background)."""
    return np.asarray(logits) > 0
