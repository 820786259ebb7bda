"""Command-line entry point: ``leafmask <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 invalid input.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .assembly import AssemblyConfig, AssemblyError, assemble_instances
from .errors import ConfigError, LeafMaskError, ShapeError
from .gradsuite import TARGETS, run_suite
from .metrics import best_dice_report
from .refine import PointPredictorParams, RefineConfig, binarize, refine_mask
from .synth import synth_rosette
from .tensor import ConvParams
from .train import ToyConfig, jsonl_logger, train_toy


def _single(tensors, preferred, path):
    """The tensor called ``preferred``, or the only tensor in the file."""
    if preferred in tensors:
        return tensors[preferred]
    if len(tensors) == 1:
        return next(iter(tensors.values()))
    raise ConfigError(f"{path}: expected a single tensor or one named {preferred!r}")


def _config(path):
    return io.read_json(path) if path else {}


def _write_instance(out, i, logits, fmt):
    io.write_lmt(out / f"instance_{i:04d}.lmt", {"logits": logits})
    io.write_labels(out / f"instance_{i:04d}.{fmt}", binarize(logits).astype(np.uint16))


def cmd_assemble(args):
    cfg = AssemblyConfig.from_dict(_config(args.config))
    bases = _single(io.read_lmt(args.bases), "bases", args.bases)
    if bases.ndim == 4 and bases.shape[0] == 1:
        bases = bases[0]
    if bases.ndim != 3:
        raise ShapeError(f"bases must be (K, H, W), got {bases.shape}")
    if bases.shape[0] != cfg.K:
        raise ShapeError(f"K mismatch: bases have {bases.shape[0]} channels, config says K={cfg.K}")
    coeff_file = io.read_lmt(args.coeffs)
    if coeff_file:
        coeffs = _single(coeff_file, "coeffs", args.coeffs)
    else:  # no records: zero instances (LMT extents are >= 1)
        coeffs = np.zeros((0, cfg.K, cfg.R_C, cfg.R_C), dtype=bases.dtype)
    boxes = io.read_boxes(args.boxes)
    if coeffs.ndim != 4:
        raise ShapeError(f"coefficients must be (P, K, R_C, R_C), got {coeffs.shape}")
    if coeffs.shape[1] != cfg.K:
        raise ShapeError(f"K mismatch: coefficients have {coeffs.shape[1]} channels, config says K={cfg.K}")
    if coeffs.shape[2:] != (cfg.R_C, cfg.R_C):
        raise ShapeError(f"R_C mismatch: coefficients are {coeffs.shape[2:]}, config says R_C={cfg.R_C}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        maps = assemble_instances(bases, coeffs.astype(bases.dtype, copy=False), boxes, cfg)
    except AssemblyError as exc:
        for i, m in enumerate(exc.results):
            if m is not None:
                _write_instance(out, i, m, args.format)
        raise
    for i, m in enumerate(maps):
        _write_instance(out, i, m, args.format)
    print(f"assembled {len(maps)} instance(s) at {cfg.R_B}x{cfg.R_B}")
    return 0


def load_predictor(tensors):
    """Point predictor from ``layers.i.weight/bias`` tensors (an optional
    ``predictor.`` prefix, as written by ``traintoy``, is accepted)."""
    tensors = {k.removeprefix("predictor."): v for k, v in tensors.items()}
    n = 0
    while f"layers.{n}.weight" in tensors:
        n += 1
    if n == 0:
        raise ConfigError("parameter file holds no point predictor layers")
    layers = tuple(ConvParams(tensors[f"layers.{i}.weight"], tensors[f"layers.{i}.bias"]) for i in range(n))
    return PointPredictorParams(layers=layers)


def cmd_refine(args):
    raw = _config(args.config)
    params = load_predictor(io.read_lmt(args.params))
    cfg = RefineConfig.from_dict(raw)
    actual_shape = {"n_layers": len(params.layers)}
    if len(params.layers) > 1:
        actual_shape["hidden"] = params.layers[0].out_channels
    for key, actual in actual_shape.items():
        if key in raw and raw[key] != actual:
            raise ConfigError(f"{key} mismatch: config says {raw[key]}, parameters have {actual}")
    coarse = io.read_lmt(args.coarse)
    features = io.read_lmt(args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (name, logits) in enumerate(coarse.items()):
        if logits.ndim != 2:
            raise ShapeError(f"coarse map {name!r} must be (H, W), got {logits.shape}")
        fine = features[name] if name in features else _single(features, "features", args.features)
        if fine.ndim != 3:
            raise ShapeError(f"fine features must be (C, Hf, Wf), got {fine.shape}")
        if fine.shape[0] != params.fine_channels:
            raise ShapeError(f"C mismatch: features have {fine.shape[0]} channels, "
                             f"parameters expect {params.fine_channels}")
        refined = refine_mask(logits, fine.astype(logits.dtype, copy=False), cfg, params)
        _write_instance(out, i, refined, args.format)
    print(f"refined {len(coarse)} map(s) with {cfg.steps} step(s)")
    return 0


def cmd_bestdice(args):
    pred = io.read_labels(args.pred)
    gt = io.read_labels(args.gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"size mismatch: pred is {pred.shape[1]}x{pred.shape[0]}, "
                         f"gt is {gt.shape[1]}x{gt.shape[0]}")
    report = best_dice_report(pred, gt)
    result = {"best_dice": report["score"], "n_gt": report["n_gt"], "n_pred": report["n_pred"],
              "matches": report["matches"]}
    lines = [f"BestDice: {report['score']:.2f}"]
    if args.symmetric:
        reverse = best_dice_report(gt, pred)["score"]
        result["reverse_best_dice"] = reverse
        result["symmetric_best_dice"] = min(report["score"], reverse)
        lines.append(f"SymmetricBestDice: {result['symmetric_best_dice']:.2f}")
    text = json.dumps(result, sort_keys=True, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text if args.json else "\n".join(lines))
    return 0


def cmd_synth(args):
    r = synth_rosette(args.seed, args.n_leaves, args.size, args.overlap, args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_labels(out / f"labels.{args.format}", r.labels)
    io.write_boxes(out / "boxes.csv", r.boxes)
    io.write_lmt(out / "features.lmt", {"features": r.features})
    print(f"wrote rosette with {r.n_leaves} leaves to {out}")
    return 0


def _gradcheck(seeds, names, stream):
    ok = True
    for report in run_suite(seeds=range(seeds), names=names):
        if not report.passed():
            ok = False
            print(report.line(), file=stream)
    return ok


def cmd_gradcheck(args):
    unknown = set(args.target or ()) - set(TARGETS)
    if unknown:
        raise ConfigError(f"unknown gradcheck targets: {sorted(unknown)}")
    ok = True
    for report in run_suite(seeds=range(args.seeds), names=args.target):
        ok &= report.passed()
        if args.verbose or not report.passed():
            print(report.line())
    print("gradcheck: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def cmd_traintoy(args):
    if not args.skip_gradcheck:
        if not _gradcheck(1, None, sys.stderr):
            print("gradcheck failed; not training", file=sys.stderr)
            return 1
        print("gradcheck: PASS")
    cfg = ToyConfig(iters=args.iters, lr=args.lr)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".jsonl")
    with open(log_path, "w") as fh:
        result = train_toy(args.seed, cfg, log=jsonl_logger(fh))
    io.write_lmt(out, result.model.tensors())
    first, last = result.history[0]["total"], result.history[-1]["total"]
    print(f"loss: {first:.4f} -> {last:.4f} over {cfg.iters} iterations")
    print(f"BestDice: {result.best_dice:.2f}")
    if args.report:
        summary = {"seed": args.seed, "iters": cfg.iters, "best_dice": result.best_dice,
                   "eval_scores": result.eval_scores, "loss_first": first, "loss_last": last}
        Path(args.report).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="leafmask", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("assemble", help="blend bases into per-instance mask logits")
    a.add_argument("--bases", required=True)
    a.add_argument("--coeffs", required=True)
    a.add_argument("--boxes", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--format", choices=("png", "pgm"), default="png")
    a.set_defaults(func=cmd_assemble)

    r = sub.add_parser("refine", help="subdivision refinement of coarse mask logits")
    r.add_argument("--coarse", required=True)
    r.add_argument("--features", required=True)
    r.add_argument("--params", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=("png", "pgm"), default="png")
    r.set_defaults(func=cmd_refine)

    b = sub.add_parser("bestdice", help="score a predicted label image against ground truth")
    b.add_argument("--pred", required=True)
    b.add_argument("--gt", required=True)
    b.add_argument("--symmetric", action="store_true")
    b.add_argument("--report", help="write the JSON report to this file")
    b.add_argument("--json", action="store_true", help="print the JSON report instead of scores")
    b.set_defaults(func=cmd_bestdice)

    s = sub.add_parser("synth", help="generate a synthetic rosette")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-leaves", type=int, default=5)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--overlap", type=float, default=0.2)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("png", "pgm"), default="png")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("traintoy", help="train the toy model on synthetic rosettes")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iters", type=int, default=ToyConfig.iters)
    t.add_argument("--lr", type=float, default=ToyConfig.lr)
    t.add_argument("--out", required=True, help="parameter file (LMT)")
    t.add_argument("--log", help="JSONL loss log (default: next to --out)")
    t.add_argument("--report", help="write a JSON summary to this file")
    t.add_argument("--skip-gradcheck", action="store_true")
    t.set_defaults(func=cmd_traintoy)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--target", action="append", help="restrict to this target (repeatable)")
    g.add_argument("--verbose", "-v", action="store_true")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LeafMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
