"""Cotton-disease detection toolkit: numpy autograd, attention and reparameterizable blocks,
weighted feature fusion, task-aligned assignment, losses, augmentation, dataset tools and metrics."""

from .augment import AugSchedule, Image, adjust_augmentation, color_jitter, letterbox, mixup, mosaic
from .blocks import C2PSA, GhostConv, GSConv, RepConvBlock, SEBlock, SpatialAttention
from .boxes import AlignmentParams, BBox, alignment_metric, assign, iou, siou_loss
from .data import DatasetManifest, compute_class_counts, split_dataset, verify_consistency
from .evaluation import EvalReport, average_precision, confusion_matrix, map_summary
from .fusion import FusionNode, fuse, pyramid_fuse
from .losses import FocalParams, LossWeights, calculate_class_weights, focal_loss, objectness_bce, total_loss
from .tensor import Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "AlignmentParams",
    "AugSchedule",
    "BBox",
    "C2PSA",
    "DatasetManifest",
    "EvalReport",
    "FocalParams",
    "FusionNode",
    "GSConv",
    "GhostConv",
    "Image",
    "LossWeights",
    "RepConvBlock",
    "SEBlock",
    "SpatialAttention",
    "Tensor",
    "adjust_augmentation",
    "alignment_metric",
    "assign",
    "average_precision",
    "calculate_class_weights",
    "color_jitter",
    "compute_class_counts",
    "confusion_matrix",
    "focal_loss",
    "fuse",
    "grad_check",
    "iou",
    "letterbox",
    "map_summary",
    "mixup",
    "mosaic",
    "objectness_bce",
    "pyramid_fuse",
    "siou_loss",
    "split_dataset",
    "total_loss",
    "verify_consistency",
]
