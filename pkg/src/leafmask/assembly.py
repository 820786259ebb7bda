"""Per-instance mask assembly: RoIAlign-crop the bases, upscale the instance's
coefficient matrices, multiply and sum over the K bases.

Box coordinates are continuous base-map units: pixel ``i`` covers ``[i, i+1)``
and its centre sits at ``i + 0.5``. Callers working at image resolution must
convert to base-map units themselves.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidBoxError, LeafMaskError, ShapeError
from .tensor import interp_matrix, resize_bilinear_backward, resize_bilinear_forward

SAMPLES_PER_BIN = 2


@dataclass(frozen=True)
class AssemblyConfig:
    R_B: int = 56
    R_C: int = 14
    K: int = 4

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.R_C < 1 or self.R_B < 1:
            raise ConfigError("resolutions must be >= 1")
        if self.R_C > self.R_B:
            raise ConfigError(f"R_C ({self.R_C}) must not exceed R_B ({self.R_B})")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"R_B", "R_C", "K"}
        if unknown:
            raise ConfigError(f"unknown assembly config keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise InvalidBoxError(f"non-finite box {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"box needs x2 > x1 and y2 > y1, got {coords}")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidBoxError(f"box score must lie in [0, 1], got {self.score}")

    def scaled(self, factor):
        return Box(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor, self.score)


class AssemblyError(LeafMaskError):
    """Raised after all instances were attempted; carries partial results."""

    def __init__(self, failures, results):
        msg = "; ".join(f"instance {i}: {e}" for i, e in failures)
        super().__init__(msg)
        self.failures = failures
        self.results = results
        self.exit_code = max(e.exit_code for _, e in failures)


def _clamp_box(box, h, w):
    x1, x2 = np.clip([box.x1, box.x2], 0.0, w)
    y1, y2 = np.clip([box.y1, box.y2], 0.0, h)
    if not (x2 > x1 and y2 > y1):
        raise InvalidBoxError(f"box {box} has zero area inside the {h}x{w} map")
    return x1, y1, x2, y2


def roi_sample_coords(start, stop, bins, samples=SAMPLES_PER_BIN):
    """Pixel-index coordinates of the regularly spaced samples in each bin,
    shape (bins, samples)."""
    bin_size = (stop - start) / bins
    offsets = (np.arange(samples) + 0.5) / samples
    cont = start + (np.arange(bins)[:, None] + offsets[None, :]) * bin_size
    return cont - 0.5


def _roi_matrix(start, stop, bins, size, dtype):
    coords = roi_sample_coords(start, stop, bins)
    m = interp_matrix(coords.ravel(), size, np.float64)
    return m.reshape(bins, SAMPLES_PER_BIN, size).mean(axis=1).astype(dtype)


def roi_align_forward(bases, box, R_B):
    if bases.ndim != 3:
        raise ShapeError(f"roi_align expects bases of shape (K,H,W), got {bases.shape}")
    _, h, w = bases.shape
    x1, y1, x2, y2 = _clamp_box(box, h, w)
    ay = _roi_matrix(y1, y2, R_B, h, bases.dtype)
    ax = _roi_matrix(x1, x2, R_B, w, bases.dtype)
    # bilinear weights factor per axis, so the 2x2-sample average is separable
    return ay @ bases @ ax.T, {"ay": ay, "ax": ax}


def roi_align_backward(dout, cache):
    return cache["ay"].T @ dout @ cache["ax"]


def roi_align(bases, box, R_B):
    """Crop (K,H,W) bases inside ``box`` to (K, R_B, R_B): each bin averages a
    2x2 grid of bilinear samples."""
    return roi_align_forward(bases, box, R_B)[0]


def upscale_coefficients_forward(c, R_B):
    if c.ndim != 3:
        raise ShapeError(f"coefficients must have shape (K,R_C,R_C), got {c.shape}")
    if R_B < c.shape[1] or R_B < c.shape[2]:
        raise ConfigError(f"R_B ({R_B}) must be >= R_C ({c.shape[1]})")
    out, ctx = resize_bilinear_forward(c[None], R_B, R_B)
    return out[0], ctx


def upscale_coefficients_backward(dout, ctx):
    return resize_bilinear_backward(dout[None], ctx)[0]


def upscale_coefficients(c, R_B):
    return upscale_coefficients_forward(c, R_B)[0]


def assemble(crop, coeff_up):
    """Blend: ``out[h, w] = sum_k crop[k, h, w] * coeff_up[k, h, w]`` (raw logits)."""
    if crop.shape != coeff_up.shape:
        raise ShapeError(f"assemble: crop {crop.shape} vs coefficients {coeff_up.shape}")
    return np.einsum("khw,khw->hw", crop, coeff_up)


def assemble_backward(dout, crop, coeff_up):
    return dout[None] * coeff_up, dout[None] * crop


def _check_instance(bases, coeff, cfg):
    if bases.ndim != 3:
        raise ShapeError(f"bases must have shape (K,H,W), got {bases.shape}")
    if bases.shape[0] != cfg.K:
        raise ShapeError(f"K mismatch: bases have {bases.shape[0]} channels, config says {cfg.K}")
    if coeff.shape[0] != cfg.K:
        raise ShapeError(f"K mismatch: coefficients have {coeff.shape[0]} channels, config says {cfg.K}")
    if coeff.shape[1:] != (cfg.R_C, cfg.R_C):
        raise ShapeError(f"R_C mismatch: coefficients are {coeff.shape[1:]}, config says {cfg.R_C}")


def assemble_instance_forward(bases, coeff, box, cfg):
    _check_instance(bases, coeff, cfg)
    crop, c_crop = roi_align_forward(bases, box, cfg.R_B)
    up, c_up = upscale_coefficients_forward(coeff, cfg.R_B)
    return assemble(crop, up), {"crop": crop, "up": up, "c_crop": c_crop, "c_up": c_up}


def assemble_instance_backward(dout, cache):
    """Returns (d_bases, d_coeff)."""
    dcrop, dup = assemble_backward(dout, cache["crop"], cache["up"])
    return roi_align_backward(dcrop, cache["c_crop"]), upscale_coefficients_backward(dup, cache["c_up"])


def assemble_instances(bases, coeffs, boxes, cfg=AssemblyConfig()):
    """One (R_B, R_B) logit map per box, in box order.

    Every instance is attempted; if any fail, ``AssemblyError`` is raised
    afterwards listing each failing index, with the successful maps (``None``
    at failed slots) attached.
    """
    if len(coeffs) != len(boxes):
        raise ShapeError(f"P mismatch: {len(coeffs)} coefficient sets for {len(boxes)} boxes")
    results, failures = [], []
    for i, (coeff, box) in enumerate(zip(coeffs, boxes)):
        try:
            results.append(assemble_instance_forward(bases, np.asarray(coeff), box, cfg)[0])
        except LeafMaskError as exc:
            results.append(None)
            failures.append((i, exc))
    if failures:
        raise AssemblyError(failures, results)
    return results
