"""Dual-attention bases, mask assembly and point-based mask refinement for
leaf instance segmentation, implemented on numpy arrays with explicit
forward/backward passes."""

from .assembly import AssemblyConfig, Box, assemble, assemble_instances, roi_align, upscale_coefficients
from .attention import (
    Arrangement,
    apply_dual_attention,
    bases_decoder,
    channel_attention_map,
    spatial_attention_map,
)
from .errors import LeafMaskError, ValidationError
from .losses import bce_mask_loss, point_loss, semantic_aux_loss, total_loss
from .metrics import best_dice, dice, symmetric_best_dice
from .refine import RefineConfig, binarize, refine_mask, sample_points_train, select_points_inference

__version__ = "0.1.0"
