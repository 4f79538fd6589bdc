"""Focal, smooth-L1 and objectness losses as graph primitives.

All three are reduced to a scalar and divided by ``max(1, positives)``.
Gradients are closed form; the probability clamp of the focal loss has zero
gradient outside ``[eps, 1 - eps]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..boxes import encode_boxes
from ..tensor import Node
from .anchors import IGNORE, NEGATIVE, assign_targets

EPS = 1e-7


@dataclass
class LossBreakdown:
    focal: float
    box: float
    confidence: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"focal": self.focal, "box": self.box, "confidence": self.confidence, "total": self.total}


def focal_loss(p, positive, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise focal loss for probabilities ``p`` and boolean targets."""
    p = np.clip(T.as_real(p), EPS, 1 - EPS)
    positive = np.asarray(positive, dtype=bool)
    return np.where(
        positive,
        -alpha * (1 - p) ** gamma * np.log(p),
        -(1 - alpha) * p ** gamma * np.log1p(-p),
    )


def focal_loss_node(logits: Node, targets: np.ndarray, valid: np.ndarray, normalizer: float,
                    alpha: float = 0.25, gamma: float = 2.0) -> Node:
    """Sum of focal losses over valid rows of (n, K) logits, over ``normalizer``."""
    z = logits.value
    t = np.asarray(targets, dtype=bool)
    v = np.asarray(valid, dtype=float)[:, None]
    p = T._sigmoid(z)
    pc = np.clip(p, EPS, 1 - EPS)
    inside = (p > EPS) & (p < 1 - EPS)
    per = focal_loss(p, t, alpha, gamma) * v
    out = np.asarray(per.sum() / normalizer)

    def backward(g):
        lp, l1p = np.log(pc), np.log1p(-pc)
        d_pos = alpha * (gamma * (1 - pc) ** (gamma - 1) * lp - (1 - pc) ** gamma / pc) if gamma else -alpha / pc
        d_neg = -(1 - alpha) * (gamma * pc ** (gamma - 1) * l1p - pc ** gamma / (1 - pc)) if gamma else (1 - alpha) / (1 - pc)
        dl_dp = np.where(t, d_pos, d_neg)
        return (g * dl_dp * p * (1 - p) * inside * v / normalizer,)

    return T._op("focal_loss", out, (logits,), backward)


def smooth_l1(x, beta: float = 1.0):
    a = np.abs(T.as_real(x))
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def smooth_l1_node(pred: Node, target: np.ndarray, mask: np.ndarray, normalizer: float, beta: float = 1.0) -> Node:
    m = np.asarray(mask, dtype=float)[:, None]
    diff = pred.value - np.where(m > 0, target, 0.0)
    out = np.asarray((smooth_l1(diff, beta) * m).sum() / normalizer)

    def backward(g):
        d = np.where(np.abs(diff) < beta, diff / beta, np.sign(diff))
        return (g * d * m / normalizer,)

    return T._op("smooth_l1", out, (pred,), backward)


def bce_logits_node(logits: Node, target: np.ndarray, valid: np.ndarray, normalizer: float) -> Node:
    """Binary cross-entropy on sigmoid(logits) for (n, 1) logits."""
    z = logits.value[:, 0]
    t = np.asarray(target, dtype=float)
    v = np.asarray(valid, dtype=float)
    per = np.maximum(z, 0) - t * z + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((per * v).sum() / normalizer)

    def backward(g):
        return ((g * (T._sigmoid(z) - t) * v / normalizer)[:, None],)

    return T._op("bce", out, (logits,), backward)


def detection_loss(fr, anchors, gts, cfg, weights=(1.0, 1.0, 1.0)) -> tuple[Node, LossBreakdown]:
    """Total training loss for one image's forward result."""
    gt_boxes = np.array([g.box for g in gts], dtype=float).reshape(-1, 4)
    gt_cls = np.array([g.cls for g in gts], dtype=int)
    labels, _ = assign_targets(anchors, gt_boxes, cfg.pos_iou, cfg.neg_iou)
    pos = labels >= 0
    valid = labels != IGNORE
    npos = int(pos.sum())
    norm = float(max(1, npos))

    k = fr.cls_logits.shape[1]
    targets = np.zeros((len(labels), k), dtype=bool)
    targets[np.flatnonzero(pos), gt_cls[labels[pos]]] = True
    focal = focal_loss_node(fr.cls_logits, targets, valid, norm, cfg.focal_alpha, cfg.focal_gamma)

    box_t = np.zeros((len(labels), 4))
    if npos:
        box_t[pos] = encode_boxes(anchors.boxes[pos], gt_boxes[labels[pos]])
    box = smooth_l1_node(fr.box_deltas, box_t, pos, norm, cfg.smooth_l1_beta)

    terms = [(weights[0], focal), (weights[1], box)]
    conf_val = 0.0
    if fr.conf_logits is not None:
        conf = bce_logits_node(fr.conf_logits, pos.astype(float), valid, norm)
        terms.append((weights[2], conf))
        conf_val = float(conf.value)
    total = T.add_scalars(terms)
    lb = LossBreakdown(float(focal.value), float(box.value), conf_val, float(total.value))
    return total, lb


__all__ = [
    "IGNORE", "NEGATIVE", "LossBreakdown", "bce_logits_node", "detection_loss",
    "focal_loss", "focal_loss_node", "smooth_l1", "smooth_l1_node",
]
