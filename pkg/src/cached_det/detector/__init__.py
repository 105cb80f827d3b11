"""Cascade detection skeleton: backbone + FPN, RPN, RoI ops, cascade heads, checkpoints."""

from .backbone import STRIDES, BackboneFPN, CompactResNet, FeaturePyramid, extract_pyramid
from .cascade import (CascadeDetector, DetectorConfig, ImageBatch, ModelStateError,
                      cascade_infer, cascade_infer_batch, prepare_images)
from .checkpoint import (CheckpointError, CheckpointVersionError, load_checkpoint,
                         save_checkpoint)
from .ops import RoIBatch, StageConfig, assign_targets, nms_stable, roi_align, sample_rois
from .rpn import ProposalSet, RegionProposalNetwork

__all__ = [
    "STRIDES", "BackboneFPN", "CompactResNet", "FeaturePyramid", "extract_pyramid",
    "CascadeDetector", "DetectorConfig", "ImageBatch", "ModelStateError", "cascade_infer",
    "cascade_infer_batch", "prepare_images", "CheckpointError", "CheckpointVersionError",
    "load_checkpoint", "save_checkpoint", "RoIBatch", "StageConfig", "assign_targets",
    "nms_stable", "roi_align", "sample_rois", "ProposalSet", "RegionProposalNetwork",
]
