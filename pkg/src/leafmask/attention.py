"""Multi-scale dual attention (spatial + channel, each with a global and a
local branch) and the small bases decoder it sits in.

Forward functions return ``(out, cache)``; backward functions take the
upstream gradient and that cache and return ``(dx, grads)`` where ``grads``
maps dotted parameter names (as produced by ``params.flatten``) to arrays.
"""

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .params import init_conv
from .tensor import (
    DTYPE,
    ConvParams,
    concat_channels_backward,
    concat_channels_forward,
    conv2d_backward,
    conv2d_forward,
    elementwise_backward,
    elementwise_forward,
    pool_backward,
    pool_forward,
    resize_bilinear_backward,
    resize_bilinear_forward,
)

DEFAULT_REDUCTION = 16


class Arrangement(str, Enum):
    SPATIAL_THEN_CHANNEL = "spatial_then_channel"
    CHANNEL_THEN_SPATIAL = "channel_then_spatial"
    PARALLEL = "parallel"
    PARALLEL_SHARED = "parallel_shared"


def parse_arrangement(mode):
    try:
        return Arrangement(mode)
    except ValueError:
        names = ", ".join(a.value for a in Arrangement)
        raise ConfigError(f"unknown arrangement {mode!r}; expected one of {names}") from None


def hidden_width(channels, reduction):
    return max(1, math.ceil(channels / reduction))


@dataclass(frozen=True)
class SpatialAttentionParams:
    global_conv1: ConvParams  # 2 -> ceil(4C/r), 3x3, over [channel-avg, channel-max]
    global_conv2: ConvParams  # -> 1, 3x3
    local_conv1: ConvParams  # C -> ceil(C/r), 1x1
    local_conv2: ConvParams  # -> 1, 1x1
    reduction: int = DEFAULT_REDUCTION

    def __post_init__(self):
        if self.global_conv1.in_channels != 2:
            raise ShapeError("spatial global branch takes the 2 pooled maps as input")
        if self.global_conv2.out_channels != 1 or self.local_conv2.out_channels != 1:
            raise ShapeError("spatial attention branches must output 1 channel")
        for conv in (self.local_conv1, self.local_conv2):
            if conv.weight.shape[2:] != (1, 1):
                raise ShapeError("spatial local branch convs must be 1x1")

    @property
    def channels(self):
        return self.local_conv1.in_channels


@dataclass(frozen=True)
class ChannelAttentionParams:
    shared_conv1: ConvParams  # C -> ceil(C/r), 1x1, applied to both descriptors
    shared_conv2: ConvParams  # -> C, 1x1
    local_conv1: ConvParams  # C -> ceil(C/r), 1x1
    local_conv2: ConvParams  # -> C, 1x1
    reduction: int = DEFAULT_REDUCTION

    def __post_init__(self):
        for conv in (self.shared_conv1, self.shared_conv2, self.local_conv1, self.local_conv2):
            if conv.weight.shape[2:] != (1, 1):
                raise ShapeError("channel attention convs must be 1x1")
        c = self.channels
        if self.shared_conv2.out_channels != c or self.local_conv2.out_channels != c:
            raise ShapeError("channel attention branches must map C -> C")

    @property
    def channels(self):
        return self.shared_conv1.in_channels


@dataclass(frozen=True)
class AttentionParams:
    spatial: SpatialAttentionParams
    channel: ChannelAttentionParams
    mode: Arrangement = Arrangement.SPATIAL_THEN_CHANNEL


def init_spatial_attention(channels, reduction=DEFAULT_REDUCTION, rng=None, dtype=DTYPE, zero=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    g_hidden = hidden_width(4 * channels, reduction)
    l_hidden = hidden_width(channels, reduction)
    return SpatialAttentionParams(
        global_conv1=init_conv(g_hidden, 2, 3, rng, dtype, zero),
        global_conv2=init_conv(1, g_hidden, 3, rng, dtype, zero),
        local_conv1=init_conv(l_hidden, channels, 1, rng, dtype, zero),
        local_conv2=init_conv(1, l_hidden, 1, rng, dtype, zero),
        reduction=reduction,
    )


def init_channel_attention(channels, reduction=DEFAULT_REDUCTION, rng=None, dtype=DTYPE, zero=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    hidden = hidden_width(channels, reduction)
    return ChannelAttentionParams(
        shared_conv1=init_conv(hidden, channels, 1, rng, dtype, zero),
        shared_conv2=init_conv(channels, hidden, 1, rng, dtype, zero),
        local_conv1=init_conv(hidden, channels, 1, rng, dtype, zero),
        local_conv2=init_conv(channels, hidden, 1, rng, dtype, zero),
        reduction=reduction,
    )


def init_attention(channels, reduction=DEFAULT_REDUCTION, mode=Arrangement.SPATIAL_THEN_CHANNEL,
                   rng=None, dtype=DTYPE, zero=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    return AttentionParams(
        spatial=init_spatial_attention(channels, reduction, rng, dtype, zero),
        channel=init_channel_attention(channels, reduction, rng, dtype, zero),
        mode=parse_arrangement(mode),
    )


# two convs with a rectifier in between


def _two_conv_forward(x, conv1, conv2):
    h, c1 = conv2d_forward(x, conv1)
    a, cr = elementwise_forward("relu_neg_slope", h, slope=0.0)
    out, c2 = conv2d_forward(a, conv2)
    return out, (c1, cr, c2)


def _two_conv_backward(dout, cache, name1, name2):
    c1, cr, c2 = cache
    da, dw2, db2 = conv2d_backward(dout, c2)
    (dh,) = elementwise_backward(da, cr)
    dx, dw1, db1 = conv2d_backward(dh, c1)
    grads = {f"{name1}.weight": dw1, f"{name1}.bias": db1, f"{name2}.weight": dw2, f"{name2}.bias": db2}
    return dx, grads


def _accumulate(total, grads, prefix=""):
    for k, v in grads.items():
        key = f"{prefix}{k}"
        total[key] = total[key] + v if key in total else v
    return total


# ---------------------------------------------------------------------------
# spatial attention
# ---------------------------------------------------------------------------


def spatial_attention_forward(x, p):
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"spatial attention expects (N,{p.channels},H,W), got {x.shape}")
    avg, ca = pool_forward(x, "channel", "avg")
    mx, cm = pool_forward(x, "channel", "max")
    pooled, cc = concat_channels_forward([avg, mx])
    g, cg = _two_conv_forward(pooled, p.global_conv1, p.global_conv2)
    loc, cl = _two_conv_forward(x, p.local_conv1, p.local_conv2)
    s, cs = elementwise_forward("broadcast_add", g, loc)
    out, csig = elementwise_forward("sigmoid", s)
    return out, {"avg": ca, "max": cm, "cat": cc, "global": cg, "local": cl, "sum": cs, "sig": csig}


def spatial_attention_backward(dout, cache):
    (ds,) = elementwise_backward(dout, cache["sig"])
    dg, dl = elementwise_backward(ds, cache["sum"])
    dpooled, grads = _two_conv_backward(dg, cache["global"], "global_conv1", "global_conv2")
    dx, lgrads = _two_conv_backward(dl, cache["local"], "local_conv1", "local_conv2")
    grads.update(lgrads)
    davg, dmax = concat_channels_backward(dpooled, cache["cat"])
    dx = dx + pool_backward(davg, cache["avg"]) + pool_backward(dmax, cache["max"])
    return dx, grads


def spatial_attention_map(x, p):
    """Spatial gate of shape (N,1,H,W), strictly inside (0, 1)."""
    return spatial_attention_forward(x, p)[0]


# ---------------------------------------------------------------------------
# channel attention
# ---------------------------------------------------------------------------


def channel_attention_forward(x, p):
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"channel attention expects (N,{p.channels},H,W), got {x.shape}")
    avg, ca = pool_forward(x, "spatial", "avg")
    mx, cm = pool_forward(x, "spatial", "max")
    ga, cga = _two_conv_forward(avg, p.shared_conv1, p.shared_conv2)
    gm, cgm = _two_conv_forward(mx, p.shared_conv1, p.shared_conv2)
    g, cg = elementwise_forward("add", ga, gm)
    loc, cl = _two_conv_forward(x, p.local_conv1, p.local_conv2)
    s, cs = elementwise_forward("broadcast_add", loc, g)
    out, csig = elementwise_forward("sigmoid", s)
    return out, {"avg": ca, "max": cm, "g_avg": cga, "g_max": cgm, "g": cg, "local": cl,
                 "sum": cs, "sig": csig}


def channel_attention_backward(dout, cache):
    (ds,) = elementwise_backward(dout, cache["sig"])
    dl, dg = elementwise_backward(ds, cache["sum"])
    dga, dgm = elementwise_backward(dg, cache["g"])
    davg, grads = _two_conv_backward(dga, cache["g_avg"], "shared_conv1", "shared_conv2")
    dmax, gm = _two_conv_backward(dgm, cache["g_max"], "shared_conv1", "shared_conv2")
    _accumulate(grads, gm)
    dx, lgrads = _two_conv_backward(dl, cache["local"], "local_conv1", "local_conv2")
    grads.update(lgrads)
    dx = dx + pool_backward(davg, cache["avg"]) + pool_backward(dmax, cache["max"])
    return dx, grads


def channel_attention_map(x, p):
    """Channel gate of shape (N,C,H,W), strictly inside (0, 1)."""
    return channel_attention_forward(x, p)[0]


# ---------------------------------------------------------------------------
# arrangements
# ---------------------------------------------------------------------------


def _gate_forward(x, gate_fn, p):
    g, cg = gate_fn(x, p)
    y, cy = elementwise_forward("broadcast_mul", x, g)
    return y, (cg, cy)


def apply_dual_attention_forward(x, sp, ch, mode=Arrangement.SPATIAL_THEN_CHANNEL):
    mode = parse_arrangement(mode)
    if sp.channels != ch.channels:
        raise ShapeError("spatial and channel attention disagree on channel count")
    if mode is Arrangement.PARALLEL_SHARED:
        ch = dataclasses.replace(ch, local_conv1=sp.local_conv1)

    if mode is Arrangement.SPATIAL_THEN_CHANNEL:
        y, c1 = _gate_forward(x, spatial_attention_forward, sp)
        z, c2 = _gate_forward(y, channel_attention_forward, ch)
        return z, {"mode": mode, "first": c1, "second": c2}
    if mode is Arrangement.CHANNEL_THEN_SPATIAL:
        y, c1 = _gate_forward(x, channel_attention_forward, ch)
        z, c2 = _gate_forward(y, spatial_attention_forward, sp)
        return z, {"mode": mode, "first": c1, "second": c2}

    s, cs = spatial_attention_forward(x, sp)
    c, cc = channel_attention_forward(x, ch)
    y, cy = elementwise_forward("broadcast_mul", x, s)
    z, cz = elementwise_forward("broadcast_mul", y, c)
    return z, {"mode": mode, "s": cs, "c": cc, "y": cy, "z": cz}


def _gate_backward(dy, cache, gate_backward):
    cg, cy = cache
    dx, dg = elementwise_backward(dy, cy)
    dx_gate, grads = gate_backward(dg, cg)
    return dx + dx_gate, grads


def apply_dual_attention_backward(dz, cache):
    mode = cache["mode"]
    grads = {}
    if mode is Arrangement.SPATIAL_THEN_CHANNEL:
        dy, g2 = _gate_backward(dz, cache["second"], channel_attention_backward)
        dx, g1 = _gate_backward(dy, cache["first"], spatial_attention_backward)
        _accumulate(grads, g1, "spatial.")
        _accumulate(grads, g2, "channel.")
        return dx, grads
    if mode is Arrangement.CHANNEL_THEN_SPATIAL:
        dy, g2 = _gate_backward(dz, cache["second"], spatial_attention_backward)
        dx, g1 = _gate_backward(dy, cache["first"], channel_attention_backward)
        _accumulate(grads, g2, "spatial.")
        _accumulate(grads, g1, "channel.")
        return dx, grads

    dy, dc = elementwise_backward(dz, cache["z"])
    dx, ds = elementwise_backward(dy, cache["y"])
    dxs, gs = spatial_attention_backward(ds, cache["s"])
    dxc, gc = channel_attention_backward(dc, cache["c"])
    _accumulate(grads, gs, "spatial.")
    if mode is Arrangement.PARALLEL_SHARED:
        for k in ("weight", "bias"):
            shared = gc.pop(f"local_conv1.{k}")
            grads[f"spatial.local_conv1.{k}"] = grads[f"spatial.local_conv1.{k}"] + shared
            gc[f"local_conv1.{k}"] = np.zeros_like(shared)
    _accumulate(grads, gc, "channel.")
    return dx + dxs + dxc, grads


def apply_dual_attention(x, sp, ch, mode=Arrangement.SPATIAL_THEN_CHANNEL):
    """Gate ``x`` by spatial and channel attention in the given arrangement."""
    return apply_dual_attention_forward(x, sp, ch, mode)[0]


# ---------------------------------------------------------------------------
# bases decoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecoderParams:
    """Stand-in decoder: 3x3 conv stack -> dual attention -> 1x1 conv to K."""

    convs: tuple  # of ConvParams, each followed by a rectifier
    attention: AttentionParams
    final: ConvParams

    @property
    def num_bases(self):
        return self.final.out_channels


def init_decoder(in_channels, width, num_bases, depth=1, reduction=DEFAULT_REDUCTION,
                 mode=Arrangement.SPATIAL_THEN_CHANNEL, rng=None, dtype=DTYPE, zero_final=False):
    if num_bases < 1:
        raise ConfigError(f"number of bases must be >= 1, got {num_bases}")
    rng = rng if rng is not None else np.random.default_rng(0)
    convs = []
    c = in_channels
    for _ in range(depth):
        convs.append(init_conv(width, c, 3, rng, dtype))
        c = width
    attention = init_attention(c, reduction, mode, rng, dtype)
    final = init_conv(num_bases, c, 1, rng, dtype, zero=zero_final)
    return DecoderParams(convs=tuple(convs), attention=attention, final=final)


def bases_decoder_forward(features, decoder):
    h = features
    stack = []
    for conv in decoder.convs:
        h, cc = conv2d_forward(h, conv)
        h, cr = elementwise_forward("relu_neg_slope", h, slope=0.0)
        stack.append((cc, cr))
    att = decoder.attention
    z, ca = apply_dual_attention_forward(h, att.spatial, att.channel, att.mode)
    b, cf = conv2d_forward(z, decoder.final)
    n, _, hh, ww = b.shape
    out, cu = resize_bilinear_forward(b, 2 * hh, 2 * ww)
    return out, {"stack": stack, "att": ca, "final": cf, "up": cu}


def bases_decoder_backward(dout, cache):
    db_ = resize_bilinear_backward(dout, cache["up"])
    dz, dwf, dbf = conv2d_backward(db_, cache["final"])
    grads = {"final.weight": dwf, "final.bias": dbf}
    dh, ga = apply_dual_attention_backward(dz, cache["att"])
    _accumulate(grads, ga, "attention.")
    for i in reversed(range(len(cache["stack"]))):
        cc, cr = cache["stack"][i]
        (dh,) = elementwise_backward(dh, cr)
        dh, dw, db = conv2d_backward(dh, cc)
        grads[f"convs.{i}.weight"] = dw
        grads[f"convs.{i}.bias"] = db
    return dh, grads


def bases_decoder(features, decoder, attention=None, K=None):
    """Bases of shape (N, K, 2H, 2W). ``attention`` overrides the decoder's own
    attention parameters; ``K`` is checked against the final conv if given."""
    if attention is not None:
        decoder = dataclasses.replace(decoder, attention=attention)
    if K is not None and K != decoder.num_bases:
        raise ConfigError(f"K mismatch: decoder produces {decoder.num_bases} bases, asked for {K}")
    return bases_decoder_forward(features, decoder)[0]
