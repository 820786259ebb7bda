"""Desk-scale toy training on synthetic rosettes.

One full-batch gradient-descent loop trains the bases decoder (with its dual
attention), a 1x1 semantic head on the bases, the point predictor, and one
free coefficient tensor per training instance. Detector terms are absent and
enter the total as zeros.

Held-out scoring freezes the network. Coefficients for unseen instances come
from a per-instance L-BFGS fit against the instance's ground-truth crop,
standing in for the coefficient head that a detector would provide. Masks are
then refined, pasted back into the image and scored with BestDice.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .assembly import (
    AssemblyConfig,
    assemble,
    assemble_instance_backward,
    assemble_instance_forward,
    roi_align,
    upscale_coefficients_backward,
    upscale_coefficients_forward,
)
from .attention import Arrangement, bases_decoder_backward, bases_decoder_forward, init_decoder
from .errors import ConfigError, DivergenceError
from .losses import (
    SEM_WEIGHT,
    bce_mask_loss,
    point_loss,
    point_targets,
    semantic_aux_loss,
    total_loss,
)
from .metrics import best_dice
from .params import flatten, init_conv, unflatten
from .refine import (
    RefineConfig,
    init_point_predictor,
    point_predict_backward,
    point_predict_forward,
    refine_mask,
    sample_points_train,
)
from .synth import FEATURE_NAMES, FEATURE_STRIDE, synth_rosette
from .tensor import conv2d_backward, conv2d_forward, sample_points_bilinear


@dataclass(frozen=True)
class ToyConfig:
    iters: int = 300
    lr: float = 0.05
    coeff_lr_scale: float = 2000.0  # each coefficient sees a small share of the mean mask gradient
    n_train: int = 4
    n_eval: int = 4
    n_leaves: int = 5
    size: int = 64
    overlap: float = 0.2
    width: int = 8
    depth: int = 1
    reduction: int = 4
    mode: Arrangement = Arrangement.SPATIAL_THEN_CHANNEL
    assembly: AssemblyConfig = AssemblyConfig(R_B=56, R_C=14, K=4)
    refine_train: RefineConfig = RefineConfig(n_points=64, steps=1, hidden=16, n_layers=3)
    refine_eval: RefineConfig = RefineConfig(n_points=784, steps=1, hidden=16, n_layers=3)
    fit_iters: int = 100
    fit_l2: float = 1e-4

    def __post_init__(self):
        if self.iters < 0 or self.lr <= 0 or self.coeff_lr_scale <= 0:
            raise ConfigError("iters must be >= 0 and step sizes > 0")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("need at least one training and one held-out scene")


@dataclass(frozen=True)
class ToyModel:
    decoder: object
    sem: object  # 1x1 ConvParams, K -> 1
    predictor: object

    def tensors(self):
        return {**flatten(self.decoder, "decoder"), **flatten(self.sem, "sem"),
                **flatten(self.predictor, "predictor")}


@dataclass
class TrainResult:
    model: ToyModel
    history: list = field(default_factory=list)  # LossBreakdown dicts, one per iteration
    eval_scores: list = field(default_factory=list)
    best_dice: float = float("nan")


def train_seeds(seed, cfg):
    return [1000 * seed + i for i in range(cfg.n_train)]


def eval_seeds(seed, cfg):
    return [1000 * seed + 500 + i for i in range(cfg.n_eval)]


def make_scene(scene_seed, cfg):
    return synth_rosette(scene_seed, cfg.n_leaves, cfg.size, cfg.overlap)


def gt_crop(labels, leaf_id, box, R_B):
    """Binary (R_B, R_B) target: RoIAlign of the visible leaf, thresholded at 0.5."""
    m = (labels == leaf_id).astype(np.float64)[None]
    return (roi_align(m, box, R_B)[0] > 0.5).astype(np.float64)


def fine_crop(features, box, size):
    """Feature crop over ``box`` (image pixel units) from the stride-2 feature map."""
    return roi_align(features.astype(np.float64), box.scaled(1.0 / FEATURE_STRIDE), size)


def init_model(cfg, rng):
    decoder = init_decoder(len(FEATURE_NAMES), cfg.width, cfg.assembly.K, cfg.depth,
                           cfg.reduction, cfg.mode, rng)
    sem = init_conv(1, cfg.assembly.K, 1, rng)
    predictor = init_point_predictor(len(FEATURE_NAMES), cfg.refine_train.hidden,
                                     cfg.refine_train.n_layers, rng)
    return ToyModel(decoder, sem, predictor)


def _scene_loss(model, coeffs, scene, cfg, point_seed, grad=True):
    """Mask, semantic and point losses for one scene and their gradients."""
    feats = scene.features[None]
    bases4, dcache = bases_decoder_forward(feats, model.decoder)
    bases = bases4[0]
    sem, scache = conv2d_forward(bases4, model.sem)
    fg = (scene.labels > 0).astype(np.float64)
    l_sem, dsem = semantic_aux_loss(sem[0], fg, return_grad=True)

    acfg = cfg.assembly
    P = len(scene.boxes)
    d_bases = np.zeros_like(bases)
    d_coeffs = np.zeros_like(coeffs)
    pred_grads = {}
    l_mask = l_points = 0.0
    for i, box in enumerate(scene.boxes):
        logits, icache = assemble_instance_forward(bases, coeffs[i], box, acfg)
        target = gt_crop(scene.labels, i + 1, box, acfg.R_B)
        lm, dl = bce_mask_loss(logits, target, return_grad=True)
        l_mask += lm / P
        if grad:
            db, dc = assemble_instance_backward(dl / P, icache)
            d_bases += db
            d_coeffs[i] = dc

        # the point head sees detached coarse logits
        pts = sample_points_train(logits, cfg.refine_train, point_seed + i)
        fine = fine_crop(scene.features, box, acfg.R_B).astype(logits.dtype)
        out, pcache = point_predict_forward(fine, logits, pts, model.predictor)
        lp, dp = point_loss(out, point_targets(target, pts), return_grad=True)
        l_points += lp / P
        if grad:
            _, _, g = point_predict_backward(dp / P, pcache)
            for k, v in g.items():
                pred_grads[k] = pred_grads.get(k, 0) + v

    if not grad:
        return (l_mask, l_sem, l_points), None
    dsem4 = dsem[None] * SEM_WEIGHT
    dbases_sem, dws, dbs = conv2d_backward(dsem4, scache)
    _, dec_grads = bases_decoder_backward(d_bases[None] + dbases_sem, dcache)
    grads = {f"decoder.{k}": v for k, v in dec_grads.items()}
    grads["sem.weight"], grads["sem.bias"] = dws, dbs
    grads.update({f"predictor.{k}": v for k, v in pred_grads.items()})
    return (l_mask, l_sem, l_points), (grads, d_coeffs)


def fit_coefficients(bases, box, target, cfg):
    """L-BFGS fit of one instance's coefficients to its ground-truth crop."""
    acfg = cfg.assembly
    bases = bases.astype(np.float64)
    crop = roi_align(bases, box, acfg.R_B)
    shape = (acfg.K, acfg.R_C, acfg.R_C)

    def fun(flat):
        c = flat.reshape(shape)
        up, ctx = upscale_coefficients_forward(c, acfg.R_B)
        loss, dl = bce_mask_loss(assemble(crop, up), target, return_grad=True)
        dc = upscale_coefficients_backward(crop * dl[None], ctx)
        return loss + cfg.fit_l2 * float(flat @ flat), (dc.ravel() + 2 * cfg.fit_l2 * flat)

    res = optimize.minimize(fun, np.zeros(math.prod(shape)), jac=True, method="L-BFGS-B",
                            options={"maxiter": cfg.fit_iters})
    return res.x.reshape(shape)


def paste(instance_logits, boxes, size):
    """Label image from per-instance logit maps over their boxes: each pixel
    takes the instance with the largest positive logit."""
    best = np.full((size, size), -np.inf)
    labels = np.zeros((size, size), dtype=np.int64)
    centres = np.arange(size) + 0.5
    for i, (m, box) in enumerate(zip(instance_logits, boxes)):
        r = m.shape[0]
        xs = np.nonzero((centres >= box.x1) & (centres < box.x2))[0]
        ys = np.nonzero((centres >= box.y1) & (centres < box.y2))[0]
        if len(xs) == 0 or len(ys) == 0:
            continue
        u = (centres[xs] - box.x1) / (box.x2 - box.x1) * r - 0.5
        v = (centres[ys] - box.y1) / (box.y2 - box.y1) * r - 0.5
        uu, vv = np.meshgrid(u, v)
        vals = sample_points_bilinear(m[None, None].astype(np.float64),
                                      np.stack([uu.ravel(), vv.ravel()], axis=1))[0, 0]
        vals = vals.reshape(len(ys), len(xs))
        sub_best = best[np.ix_(ys, xs)]
        win = (vals > 0) & (vals > sub_best)
        sub_labels = labels[np.ix_(ys, xs)]
        sub_labels[win] = i + 1
        sub_best[win] = vals[win]
        labels[np.ix_(ys, xs)] = sub_labels
        best[np.ix_(ys, xs)] = sub_best
    return labels


def predict_scene(model, scene, cfg):
    """Held-out prediction: frozen network, fitted coefficients, refinement."""
    acfg = cfg.assembly
    bases = bases_decoder_forward(scene.features[None], model.decoder)[0][0]
    maps = []
    for i, box in enumerate(scene.boxes):
        target = gt_crop(scene.labels, i + 1, box, acfg.R_B)
        coeff = fit_coefficients(bases, box, target, cfg)
        logits = assemble_instance_forward(bases, coeff.astype(bases.dtype), box, acfg)[0]
        fine = fine_crop(scene.features, box, acfg.R_B).astype(logits.dtype)
        maps.append(refine_mask(logits, fine, cfg.refine_eval, model.predictor))
    return paste(maps, scene.boxes, scene.labels.shape[0])


def evaluate(model, seed, cfg):
    scores = []
    for s in eval_seeds(seed, cfg):
        scene = make_scene(s, cfg)
        scores.append(best_dice(predict_scene(model, scene, cfg), scene.labels))
    return scores


def train_toy(seed=0, cfg=ToyConfig(), log=None):
    """Train on synthetic scenes and score held-out ones.

    ``log`` is an optional callable receiving each iteration's breakdown dict.
    Raises DivergenceError on the first non-finite loss.
    """
    rng = np.random.default_rng(seed)
    model = init_model(cfg, rng)
    scenes = [make_scene(s, cfg) for s in train_seeds(seed, cfg)]
    acfg = cfg.assembly
    coeffs = [np.zeros((sc.n_leaves, acfg.K, acfg.R_C, acfg.R_C), dtype=np.float32) for sc in scenes]
    result = TrainResult(model=model)
    n = len(scenes)
    for it in range(cfg.iters + 1):
        sums = np.zeros(3)
        grads = {}
        d_coeffs = []
        for j, scene in enumerate(scenes):
            parts, (g, dc) = _scene_loss(model, coeffs[j], scene, cfg, point_seed=(it * 7919 + j) * 97)
            sums += parts
            for k, v in g.items():
                grads[k] = grads.get(k, 0) + v / n
            d_coeffs.append(dc / n)
        l_mask, l_sem, l_points = (sums / n).tolist()
        if not all(math.isfinite(v) for v in (l_mask, l_sem, l_points)):
            raise DivergenceError(it)
        breakdown = total_loss(0.0, 0.0, 0.0, l_mask, l_sem, l_points)
        record = {"iteration": it, **breakdown.as_dict()}
        result.history.append(record)
        if log is not None:
            log(record)
        if it == cfg.iters:
            break
        flat = model.tensors()
        flat = {k: (v - cfg.lr * grads[k]).astype(v.dtype) for k, v in flat.items()}
        if not all(np.all(np.isfinite(v)) for v in flat.values()):
            raise DivergenceError(it)
        model = ToyModel(unflatten(model.decoder, flat, "decoder"), unflatten(model.sem, flat, "sem"),
                         unflatten(model.predictor, flat, "predictor"))
        step = cfg.lr * cfg.coeff_lr_scale
        coeffs = [(c - step * d).astype(c.dtype) for c, d in zip(coeffs, d_coeffs)]
    result.model = model
    result.eval_scores = evaluate(model, seed, cfg)
    result.best_dice = float(np.mean(result.eval_scores))
    return result


def jsonl_logger(fh):
    def log(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return log
