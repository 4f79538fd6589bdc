from .anchors import AnchorSet, assign_targets, generate_anchors
from .losses import LossBreakdown, detection_loss, focal_loss, smooth_l1
from .metrics import METRIC_NAMES, coco_metrics
from .model import (
    Detector,
    DetectorConfig,
    FeaturePyramid,
    apply_dsa,
    build_toy_fpn,
    forward,
    head_forward,
    top_down_fusion,
)
from .nms import Detection, nms, postprocess
from .train import OptimizerConfig, TrainState, detect, evaluate_ap, lr_at_epoch, train_epoch

__all__ = [
    "METRIC_NAMES", "AnchorSet", "Detection", "Detector", "DetectorConfig", "FeaturePyramid", "LossBreakdown",
    "OptimizerConfig", "TrainState", "apply_dsa", "assign_targets", "build_toy_fpn", "coco_metrics", "detect",
    "detection_loss", "evaluate_ap", "focal_loss", "forward", "generate_anchors", "head_forward", "lr_at_epoch",
    "nms", "postprocess", "smooth_l1", "top_down_fusion", "train_epoch",
]
