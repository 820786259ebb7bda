"""Dense NCHW numerical primitives with explicit backward passes.

Tensors are plain ``numpy.ndarray`` objects. float32 is the working precision;
passing float64 arrays (and float64 parameters) runs the identical code path in
64-bit, which is what the gradient checks use.

Every differentiable op comes as a pair::

    out, ctx = conv2d_forward(x, params)
    dx, dw, db = conv2d_backward(dout, ctx)

plus a convenience wrapper (``conv2d``) that drops the context. ``backward``
dispatches on ``ctx.op`` for generic callers.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

DTYPE = np.float32


@dataclass(frozen=True)
class Context:
    """Saved forward state of one op, consumed by its backward."""

    op: str
    saved: dict = field(default_factory=dict)


def tensor(data, dtype=DTYPE):
    """Build a validated tensor: rank 1-4, every extent >= 1, finite values."""
    t = np.array(data, dtype=dtype)
    if not 1 <= t.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1..4, got {t.ndim}")
    if t.size == 0:
        raise ShapeError(f"tensor extents must be >= 1, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def _require_rank(x, rank, where):
    if x.ndim != rank:
        raise ShapeError(f"{where}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int | None = None  # None -> same padding (k // 2)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        oc, _, kh, kw = self.weight.shape
        if self.bias.shape != (oc,):
            raise ShapeError(f"conv bias must have shape ({oc},), got {self.bias.shape}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv kernel extents must be odd, got {kh}x{kw}")
        if self.stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {self.stride}")
        if self.stride != 1:
            raise ConfigError("conv stride > 1 is not supported")
        if self.padding is not None and self.padding < 0:
            raise ConfigError(f"conv padding must be >= 0, got {self.padding}")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def pad(self):
        if self.padding is None:
            return self.weight.shape[2] // 2, self.weight.shape[3] // 2
        return self.padding, self.padding


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph : ph + h, pw : pw + w] = x
    return xp


def conv2d_forward(x, params):
    _require_rank(x, 4, "conv2d")
    n, c, h, w = x.shape
    oc, ic, kh, kw = params.weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {ic}")
    ph, pw = params.pad
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = _pad(x, ph, pw)
    if kh == kw == 1:
        # Channel-by-channel accumulation: every pixel sees the same sequence
        # of roundings, so the map is exactly equivariant to pixel permutations
        # (BLAS kernels round differently in tail columns).
        wt = params.weight[:, :, 0, 0]
        out = np.zeros((n, oc, ho, wo), dtype=np.result_type(xp, wt))
        for i in range(ic):
            out += wt[None, :, i, None, None] * xp[:, i, None]
    else:
        cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        # cols: (n, c, ho, wo, kh, kw)
        out = np.tensordot(cols, params.weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + params.bias[None, :, None, None]
    ctx = Context("conv2d", {"xp": xp, "params": params, "in_shape": x.shape})
    return np.ascontiguousarray(out), ctx


def conv2d_backward(dout, ctx):
    xp, params = ctx.saved["xp"], ctx.saved["params"]
    n, c, h, w = ctx.saved["in_shape"]
    _, _, kh, kw = params.weight.shape
    ph, pw = params.pad
    ho, wo = dout.shape[2], dout.shape[3]
    db = dout.sum(axis=(0, 2, 3))
    if kh == kw == 1:
        dw = np.tensordot(dout, xp, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dxp = np.tensordot(params.weight[:, :, 0, 0], dout, axes=([0], [1])).transpose(1, 0, 2, 3)
    else:
        cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros_like(xp, dtype=np.result_type(dout, params.weight))
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(dout, params.weight[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i : i + ho, j : j + wo] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(dx), dw.astype(params.weight.dtype, copy=False), db


def conv2d(x, params):
    return conv2d_forward(x, params)[0]


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

POOL_AXES = ("channel", "spatial")
POOL_KINDS = ("avg", "max")


def pool_forward(x, axis, kind):
    """Global pooling. ``channel`` reduces C -> (N,1,H,W); ``spatial`` reduces
    H*W -> (N,C,1,1). Max ties resolve to the lowest flat index."""
    _require_rank(x, 4, "pool")
    if axis not in POOL_AXES:
        raise ConfigError(f"pool axis must be one of {POOL_AXES}, got {axis!r}")
    if kind not in POOL_KINDS:
        raise ConfigError(f"pool kind must be one of {POOL_KINDS}, got {kind!r}")
    n, c, h, w = x.shape
    xr = x if axis == "channel" else x.reshape(n, c, h * w, 1)
    red = 1 if axis == "channel" else 2
    if kind == "avg" and axis == "spatial":
        # summing in sorted order over a C-contiguous copy (numpy's reduction
        # order follows memory layout) makes the mean exactly invariant to any
        # permutation of the H*W positions
        ordered = np.ascontiguousarray(np.sort(xr, axis=red))
        out = ordered.sum(axis=red, keepdims=True) / xr.dtype.type(h * w)
        idx = None
    elif kind == "avg":
        out = xr.mean(axis=red, keepdims=True)
        idx = None
    else:
        idx = np.argmax(xr, axis=red, keepdims=True)
        out = np.take_along_axis(xr, idx, axis=red)
    if axis == "spatial":
        out = out.reshape(n, c, 1, 1)
    saved = {"shape": x.shape, "axis": axis, "kind": kind, "argmax": idx}
    return out, Context("pool", saved)


def pool_backward(dout, ctx):
    n, c, h, w = ctx.saved["shape"]
    axis, kind = ctx.saved["axis"], ctx.saved["kind"]
    if axis == "channel":
        red, rshape, count = 1, (n, c, h, w), c
        d = dout
    else:
        red, rshape, count = 2, (n, c, h * w, 1), h * w
        d = dout.reshape(n, c, 1, 1)
    if kind == "avg":
        dx = np.broadcast_to(d / count, rshape).copy()
    else:
        dx = np.zeros(rshape, dtype=dout.dtype)
        np.put_along_axis(dx, ctx.saved["argmax"], d, axis=red)
    return dx.reshape(n, c, h, w)


def pool(x, axis, kind):
    return pool_forward(x, axis, kind)[0]


def concat_channels_forward(tensors):
    out = np.concatenate(tensors, axis=1)
    return out, Context("concat", {"sizes": [t.shape[1] for t in tensors]})


def concat_channels_backward(dout, ctx):
    splits = np.cumsum(ctx.saved["sizes"])[:-1]
    return tuple(np.split(dout, splits, axis=1))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

UNARY_OPS = ("sigmoid", "relu_neg_slope")
BINARY_OPS = ("add", "mul", "broadcast_add", "broadcast_mul")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep the output inside the open interval even where exp saturates
    lo = np.nextafter(x.dtype.type(0), x.dtype.type(1))
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    return np.clip(s, lo, hi)


def _broadcast_check(a, b, op):
    if op in ("add", "mul"):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
        return
    if a.ndim != b.ndim or any(bd not in (1, ad) for ad, bd in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: {b.shape} is not broadcastable onto {a.shape}")


def _reduce_to(g, shape):
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def elementwise_forward(op, a, b=None, slope=0.0):
    if op == "sigmoid":
        out = _sigmoid(a)
        return out, Context("elementwise", {"op": op, "out": out})
    if op == "relu_neg_slope":
        mask = a >= 0
        out = np.where(mask, a, a * a.dtype.type(slope)) if slope else np.where(mask, a, a.dtype.type(0))
        return out, Context("elementwise", {"op": op, "mask": mask, "slope": slope})
    if op not in BINARY_OPS:
        raise ConfigError(f"unknown elementwise op {op!r}")
    if b is None:
        raise UsageError(f"{op} needs two operands")
    _broadcast_check(a, b, op)
    out = a + b if op in ("add", "broadcast_add") else a * b
    saved = {"op": op, "a_shape": a.shape, "b_shape": b.shape}
    if op in ("mul", "broadcast_mul"):
        saved.update(a=a, b=b)
    return out, Context("elementwise", saved)


def elementwise_backward(dout, ctx):
    s = ctx.saved
    op = s["op"]
    if op == "sigmoid":
        y = s["out"]
        return (dout * y * (1 - y),)
    if op == "relu_neg_slope":
        return (np.where(s["mask"], dout, dout * dout.dtype.type(s["slope"])),)
    if op in ("add", "broadcast_add"):
        return dout, _reduce_to(dout, s["b_shape"])
    return dout * s["b"], _reduce_to(dout * s["a"], s["b_shape"])


def elementwise(op, a, b=None, slope=0.0):
    return elementwise_forward(op, a, b, slope)[0]


def sigmoid(x):
    return _sigmoid(x)


def relu(x, slope=0.0):
    return elementwise("relu_neg_slope", x, slope=slope)


def broadcast_add(a, b):
    return elementwise("broadcast_add", a, b)


def broadcast_mul(a, b):
    return elementwise("broadcast_mul", a, b)


# ---------------------------------------------------------------------------
# bilinear resampling (half-pixel centres everywhere)
# ---------------------------------------------------------------------------


def interp_matrix(coords, size, dtype=DTYPE):
    """Rows of linear-interpolation weights for pixel-index ``coords`` (pixel
    centres at integers) over an axis of ``size`` samples, clamped to range."""
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, size - 1)
    i0 = np.floor(c).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    f = c - i0
    m = np.zeros((c.shape[0], size), dtype=np.float64)
    rows = np.arange(c.shape[0])
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m.astype(dtype)


def resize_source_coords(in_size, out_size):
    return (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5


def resize_bilinear_forward(x, out_h, out_w):
    _require_rank(x, 4, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be >= 1, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    ry = interp_matrix(resize_source_coords(h, out_h), h, x.dtype)
    rx = interp_matrix(resize_source_coords(w, out_w), w, x.dtype)
    out = ry @ x @ rx.T
    return out, Context("resize_bilinear", {"ry": ry, "rx": rx})


def resize_bilinear_backward(dout, ctx):
    return ctx.saved["ry"].T @ dout @ ctx.saved["rx"]


def resize_bilinear(x, out_h, out_w):
    return resize_bilinear_forward(x, out_h, out_w)[0]


def _corner_weights(points, h, w):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    px = np.clip(pts[:, 0], 0.0, w - 1)
    py = np.clip(pts[:, 1], 0.0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = px - x0, py - y0
    flat = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    return flat, wts


def sample_points_bilinear_forward(x, points):
    """Bilinear values of ``x`` (N,C,H,W) at ``points`` given as (x, y) pixel
    coordinates; returns (N, C, P). Points are clamped to the image."""
    _require_rank(x, 4, "sample_points_bilinear")
    n, c, h, w = x.shape
    flat, wts = _corner_weights(points, h, w)
    xf = x.reshape(n, c, h * w)
    wts_t = wts.astype(x.dtype)
    out = sum(xf[:, :, flat[k]] * wts_t[k] for k in range(4))
    return out, Context("sample_points_bilinear", {"flat": flat, "wts": wts_t, "shape": x.shape})


def sample_points_bilinear_backward(dout, ctx):
    n, c, h, w = ctx.saved["shape"]
    flat, wts = ctx.saved["flat"], ctx.saved["wts"]
    dx = np.zeros((n * c, h * w), dtype=dout.dtype)
    d = dout.reshape(n * c, -1)
    for k in range(4):
        np.add.at(dx, (slice(None), flat[k]), d * wts[k])
    return dx.reshape(n, c, h, w)


def sample_points_bilinear(x, points):
    return sample_points_bilinear_forward(x, points)[0]


# ---------------------------------------------------------------------------
# generic dispatch
# ---------------------------------------------------------------------------

_BACKWARD = {
    "conv2d": conv2d_backward,
    "pool": pool_backward,
    "concat": concat_channels_backward,
    "elementwise": elementwise_backward,
    "resize_bilinear": resize_bilinear_backward,
    "sample_points_bilinear": sample_points_bilinear_backward,
}


def backward(ctx, dout):
    """Gradients of the op recorded in ``ctx`` given the upstream gradient."""
    if not isinstance(ctx, Context):
        raise UsageError("backward called without a saved forward context")
    try:
        fn = _BACKWARD[ctx.op]
    except KeyError:
        raise UsageError(f"no backward registered for op {ctx.op!r}") from None
    return fn(dout, ctx)


def decision_signature(cache):
    """Concatenated branch decisions (ReLU masks, max-pool argmaxes) found in a
    nested cache. Two evaluations with equal signatures lie on the same smooth
    piece of a piecewise-smooth function."""
    parts = []

    def walk(obj):
        if isinstance(obj, Context):
            if obj.op == "elementwise" and "mask" in obj.saved:
                parts.append(np.packbits(obj.saved["mask"]).tobytes())
            elif obj.op == "pool" and obj.saved.get("argmax") is not None:
                parts.append(obj.saved["argmax"].tobytes())
        elif isinstance(obj, dict):
            for v in obj.values():
                walk(v)
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                walk(v)

    walk(cache)
    return b"|".join(parts)
