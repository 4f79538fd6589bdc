"""Anchor tiling and target assignment (RetinaNet convention, square anchors)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import centre_to_corners, iou_matrix

NEGATIVE = -1
IGNORE = -2


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (total, 4) centre form, ordered level, y, x, anchor
    counts: dict[int, int]  # per level
    strides: dict[int, int]

    def __len__(self):
        return len(self.boxes)

    def corners(self) -> np.ndarray:
        return centre_to_corners(self.boxes)


def generate_anchors(level_shapes, n_anchors: int = 3, base: float = 4.0) -> AnchorSet:
    """``level_shapes``: iterable of (level, height, width).

    Each position gets ``n_anchors`` squares of side ``stride * base * 2**(i/A)``
    centred at ``((x + 0.5) * stride, (y + 0.5) * stride)``.
    """
    if n_anchors < 1:
        raise ValueError(f"need at least one anchor per position, got {n_anchors}")
    chunks, counts, strides = [], {}, {}
    for level, h, w in level_shapes:
        stride = 2 ** level
        sides = stride * base * 2.0 ** (np.arange(n_anchors) / n_anchors)
        ys, xs = np.mgrid[0:h, 0:w]
        cx = (xs.ravel() + 0.5) * stride
        cy = (ys.ravel() + 0.5) * stride
        n = h * w
        block = np.empty((n, n_anchors, 4))
        block[:, :, 0] = cx[:, None]
        block[:, :, 1] = cy[:, None]
        block[:, :, 2] = sides[None, :]
        block[:, :, 3] = sides[None, :]
        chunks.append(block.reshape(-1, 4))
        counts[level] = n * n_anchors
        strides[level] = stride
    return AnchorSet(np.concatenate(chunks), counts, strides)


def assign_targets(anchors: AnchorSet | np.ndarray, gt_boxes, pos_thr: float = 0.5, neg_thr: float = 0.4):
    """Label each anchor with a gt index (positive), NEGATIVE or IGNORE.

    Returns ``(labels, max_iou)``. Max-IoU ties go to the lowest gt id; each
    gt then claims its single best anchor (lowest anchor id on ties), the
    lowest gt id winning when two gts claim the same anchor.
    """
    if not 0 <= neg_thr <= pos_thr <= 1:
        raise ValueError(f"need 0 <= neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    boxes = anchors.corners() if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=float)
    n = len(boxes)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.full(n, NEGATIVE), np.zeros(n)
    ious = iou_matrix(boxes, gt_boxes)
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best_gt]
    labels = np.where(max_iou >= pos_thr, best_gt, np.where(max_iou < neg_thr, NEGATIVE, IGNORE))
    best_anchor = ious.argmax(axis=0)
    for j in reversed(range(len(gt_boxes))):
        if ious[best_anchor[j], j] > 0:
            labels[best_anchor[j]] = j
    return labels, max_iou
