"""Realign the safety of fine-tuned checkpoints by removing and recalibrating unsafe delta parameters."""

from .deltas import (
    DeltaSet,
    MaskSet,
    compute_delta,
    dare_transform,
    interference_candidates,
    remove_deltas,
    resta_merge,
    safety_vector,
)
from .fisher import FisherDiag, estimate_fisher, topk_threshold
from .masks import build_mask, extend_mask_more
from .surgery import LayerHessian, SurgeryPlan, build_hessian, recalibrate_layer, run_surgery
from .tensors import ParamSet, assert_compatible, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
