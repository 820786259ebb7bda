"""Gradient-check targets for every differentiable op and composite module.

Each builder takes a seed and returns ``(arrays, f)`` for
``gradcheck.check_gradients``. Shapes are drawn per seed so a run over many
seeds also covers many shapes. Scalar losses are random projections of the
op output, which exercises every output element with a distinct weight.
"""

import numpy as np

from . import assembly, attention, losses, refine, tensor
from .gradcheck import check_gradients
from .params import cast, flatten, unflatten

F64 = np.float64


def _projection(rng, shape):
    return rng.standard_normal(shape)


def _with_params(template, prefix, arrays):
    return unflatten(template, {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})


def _prefixed(obj, prefix):
    return {prefix + k: v for k, v in flatten(obj).items()}


def _small_params(obj, rng, scale=0.5):
    """Replace every array with a small random draw (biases included), so all
    branches of the module carry signal."""
    flat = flatten(obj)
    return unflatten(obj, {k: rng.standard_normal(v.shape) * scale for k, v in flat.items()})


# ---------------------------------------------------------------------------
# tensor-core primitives
# ---------------------------------------------------------------------------


def conv2d_target(seed):
    rng = np.random.default_rng(seed)
    n, c, oc = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3, 5]))
    h, w = rng.integers(k // 2 + 1, 7, size=2)
    arrays = {"x": rng.standard_normal((n, c, h, w)), "weight": rng.standard_normal((oc, c, k, k)),
              "bias": rng.standard_normal(oc)}
    proj = _projection(rng, (n, oc, h, w))

    def f(a, grad=True):
        p = tensor.ConvParams(a["weight"], a["bias"])
        out, ctx = tensor.conv2d_forward(a["x"], p)
        if not grad:
            return float((out * proj).sum()), None, ctx
        dx, dw, db = tensor.conv2d_backward(proj, ctx)
        return float((out * proj).sum()), {"x": dx, "weight": dw, "bias": db}, ctx

    return arrays, f


def pool_target(axis, kind):
    def build(seed):
        rng = np.random.default_rng(seed)
        shape = (rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5))
        arrays = {"x": rng.standard_normal(shape)}
        out_shape = (shape[0], 1, shape[2], shape[3]) if axis == "channel" else (shape[0], shape[1], 1, 1)
        proj = _projection(rng, out_shape)

        def f(a, grad=True):
            out, ctx = tensor.pool_forward(a["x"], axis, kind)
            if not grad:
                return float((out * proj).sum()), None, ctx
            return float((out * proj).sum()), {"x": tensor.pool_backward(proj, ctx)}, ctx

        return arrays, f

    return build


def elementwise_target(op):
    def build(seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(s) for s in rng.integers(1, 5, size=4))
        arrays = {"a": rng.standard_normal(shape) * 2}
        slope = float(rng.uniform(0, 1))
        if op in ("add", "mul"):
            arrays["b"] = rng.standard_normal(shape)
        elif op.startswith("broadcast"):
            bshape = tuple(s if rng.random() < 0.5 else 1 for s in shape)
            arrays["b"] = rng.standard_normal(bshape)
        proj = _projection(rng, shape)

        def f(a, grad=True):
            out, ctx = tensor.elementwise_forward(op, a["a"], a.get("b"), slope=slope)
            if not grad:
                return float((out * proj).sum()), None, ctx
            g = tensor.elementwise_backward(proj, ctx)
            grads = {"a": g[0]}
            if len(g) > 1:
                grads["b"] = g[1]
            return float((out * proj).sum()), grads, ctx

        return arrays, f

    return build


def resize_target(seed):
    rng = np.random.default_rng(seed)
    shape = (rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 6), rng.integers(1, 6))
    oh, ow = (int(v) for v in rng.integers(1, 9, size=2))
    arrays = {"x": rng.standard_normal(shape)}
    proj = _projection(rng, (shape[0], shape[1], oh, ow))

    def f(a, grad=True):
        out, ctx = tensor.resize_bilinear_forward(a["x"], oh, ow)
        if not grad:
            return float((out * proj).sum()), None, ctx
        return float((out * proj).sum()), {"x": tensor.resize_bilinear_backward(proj, ctx)}, ctx

    return arrays, f


def sample_points_target(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = (int(v) for v in rng.integers(1, 5, size=4))
    p = int(rng.integers(1, 12))
    pts = np.stack([rng.uniform(-1, w, p), rng.uniform(-1, h, p)], axis=1)
    arrays = {"x": rng.standard_normal((n, c, h, w))}
    proj = _projection(rng, (n, c, p))

    def f(a, grad=True):
        out, ctx = tensor.sample_points_bilinear_forward(a["x"], pts)
        if not grad:
            return float((out * proj).sum()), None, ctx
        return float((out * proj).sum()), {"x": tensor.sample_points_bilinear_backward(proj, ctx)}, ctx

    return arrays, f


# ---------------------------------------------------------------------------
# attention and decoder
# ---------------------------------------------------------------------------


def _attention_shapes(rng):
    c = int(rng.integers(2, 5))
    r = int(rng.choice([2, 4]))
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(2, 5, size=2))
    return n, c, h, w, r


def spatial_attention_target(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w, r = _attention_shapes(rng)
    sp = _small_params(attention.init_spatial_attention(c, r, rng, F64), rng)
    arrays = {"x": rng.standard_normal((n, c, h, w)), **_prefixed(sp, "p.")}
    proj = _projection(rng, (n, 1, h, w))

    def f(a, grad=True):
        p = _with_params(sp, "p.", a)
        out, cache = attention.spatial_attention_forward(a["x"], p)
        if not grad:
            return float((out * proj).sum()), None, cache
        dx, g = attention.spatial_attention_backward(proj, cache)
        return float((out * proj).sum()), {"x": dx, **{"p." + k: v for k, v in g.items()}}, cache

    return arrays, f


def channel_attention_target(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w, r = _attention_shapes(rng)
    ch = _small_params(attention.init_channel_attention(c, r, rng, F64), rng)
    arrays = {"x": rng.standard_normal((n, c, h, w)), **_prefixed(ch, "p.")}
    proj = _projection(rng, (n, c, h, w))

    def f(a, grad=True):
        p = _with_params(ch, "p.", a)
        out, cache = attention.channel_attention_forward(a["x"], p)
        if not grad:
            return float((out * proj).sum()), None, cache
        dx, g = attention.channel_attention_backward(proj, cache)
        return float((out * proj).sum()), {"x": dx, **{"p." + k: v for k, v in g.items()}}, cache

    return arrays, f


def dual_attention_target(mode):
    def build(seed):
        rng = np.random.default_rng(seed)
        n, c, h, w, r = _attention_shapes(rng)
        att = _small_params(attention.init_attention(c, r, mode, rng, F64), rng)
        arrays = {"x": rng.standard_normal((n, c, h, w)), **_prefixed(att, "p.")}
        proj = _projection(rng, (n, c, h, w))

        def f(a, grad=True):
            p = _with_params(att, "p.", a)
            out, cache = attention.apply_dual_attention_forward(a["x"], p.spatial, p.channel, p.mode)
            if not grad:
                return float((out * proj).sum()), None, cache
            dx, g = attention.apply_dual_attention_backward(proj, cache)
            return float((out * proj).sum()), {"x": dx, **{"p." + k: v for k, v in g.items()}}, cache

        return arrays, f

    return build


def bases_decoder_target(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w, r = _attention_shapes(rng)
    k = int(rng.choice([1, 2, 4]))
    width = int(rng.integers(2, 5))
    mode = rng.choice([m.value for m in attention.Arrangement])
    dec = _small_params(attention.init_decoder(c, width, k, 1, r, mode, rng, F64), rng)
    arrays = {"x": rng.standard_normal((n, c, h, w)), **_prefixed(dec, "p.")}
    proj = _projection(rng, (n, k, 2 * h, 2 * w))

    def f(a, grad=True):
        p = _with_params(dec, "p.", a)
        out, cache = attention.bases_decoder_forward(a["x"], p)
        if not grad:
            return float((out * proj).sum()), None, cache
        dx, g = attention.bases_decoder_backward(proj, cache)
        return float((out * proj).sum()), {"x": dx, **{"p." + k: v for k, v in g.items()}}, cache

    return arrays, f


# ---------------------------------------------------------------------------
# assembly, point predictor, losses
# ---------------------------------------------------------------------------


def assembly_target(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    hb, wb = (int(v) for v in rng.integers(4, 9, size=2))
    r_c = int(rng.integers(1, 4))
    r_b = int(rng.integers(r_c, 7))
    cfg = assembly.AssemblyConfig(R_B=r_b, R_C=r_c, K=k)
    x1, y1 = rng.uniform(-1, wb / 2), rng.uniform(-1, hb / 2)
    box = assembly.Box(x1, y1, x1 + rng.uniform(1, wb / 2 + 1), y1 + rng.uniform(1, hb / 2 + 1))
    arrays = {"bases": rng.standard_normal((k, hb, wb)), "coeff": rng.standard_normal((k, r_c, r_c))}
    proj = _projection(rng, (r_b, r_b))

    def f(a, grad=True):
        out, cache = assembly.assemble_instance_forward(a["bases"], a["coeff"], box, cfg)
        if not grad:
            return float((out * proj).sum()), None, cache
        db, dc = assembly.assemble_instance_backward(proj, cache)
        return float((out * proj).sum()), {"bases": db, "coeff": dc}, cache

    return arrays, f


def point_predictor_target(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    hidden = int(rng.integers(1, 6))
    n_layers = int(rng.integers(1, 4))
    hf, wf = (int(v) for v in rng.integers(2, 6, size=2))
    h, w = (int(v) for v in rng.integers(2, 8, size=2))
    pp = _small_params(refine.init_point_predictor(c, hidden, n_layers, rng, F64), rng)
    n_pts = int(rng.integers(1, 10))
    pts = refine.PointSet(
        coords=np.stack([rng.uniform(-0.5, w - 0.5, n_pts), rng.uniform(-0.5, h - 0.5, n_pts)], axis=1),
        kinds=(refine.UNCERTAIN,) * n_pts,
    )
    arrays = {"fine": rng.standard_normal((c, hf, wf)), "coarse": rng.standard_normal((h, w)),
              **_prefixed(pp, "p.")}
    proj = _projection(rng, (n_pts,))

    def f(a, grad=True):
        p = _with_params(pp, "p.", a)
        out, cache = refine.point_predict_forward(a["fine"], a["coarse"], pts, p)
        if not grad:
            return float((out * proj).sum()), None, cache
        d_fine, d_coarse, g = refine.point_predict_backward(proj, cache)
        grads = {"fine": d_fine, "coarse": d_coarse, **{"p." + k: v for k, v in g.items()}}
        return float((out * proj).sum()), grads, cache

    return arrays, f


def _loss_target(kind):
    def build(seed):
        rng = np.random.default_rng(seed)
        if kind == "point":
            shape = (int(rng.integers(1, 10)),)
        elif kind == "semantic":
            shape = (1,) + tuple(int(v) for v in rng.integers(1, 6, size=2))
        else:
            shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        target = (rng.random(shape) < 0.5).astype(np.float64)
        arrays = {"logits": rng.standard_normal(shape) * 3}
        fn = {"mask": losses.bce_mask_loss, "semantic": losses.semantic_aux_loss,
              "point": losses.point_loss}[kind]

        def f(a, grad=True):
            loss, g = fn(a["logits"], target, return_grad=True)
            return loss, {"logits": g}, None

        return arrays, f

    return build


TARGETS = {
    "conv2d": conv2d_target,
    "pool[channel,avg]": pool_target("channel", "avg"),
    "pool[channel,max]": pool_target("channel", "max"),
    "pool[spatial,avg]": pool_target("spatial", "avg"),
    "pool[spatial,max]": pool_target("spatial", "max"),
    **{f"elementwise[{op}]": elementwise_target(op) for op in tensor.UNARY_OPS + tensor.BINARY_OPS},
    "resize_bilinear": resize_target,
    "sample_points_bilinear": sample_points_target,
    "spatial_attention": spatial_attention_target,
    "channel_attention": channel_attention_target,
    **{f"dual_attention[{m.value}]": dual_attention_target(m.value) for m in attention.Arrangement},
    "bases_decoder": bases_decoder_target,
    "assembly": assembly_target,
    "point_predictor": point_predictor_target,
    "bce_mask_loss": _loss_target("mask"),
    "semantic_aux_loss": _loss_target("semantic"),
    "point_loss": _loss_target("point"),
}


def run_target(name, seed):
    arrays, f = TARGETS[name](seed)
    return check_gradients(f, arrays, name=f"{name} seed={seed}")


def run_suite(seeds=range(20), names=None):
    """Run every (or the named) target over ``seeds``; yields GradReports."""
    for name in names or TARGETS:
        for seed in seeds:
            yield run_target(name, seed)
