"""Detection records, greedy per-class NMS and post-processing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import decode_boxes, iou_matrix
from ..tensor import _sigmoid


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    cls: int
    cls_score: float
    conf_score: float | None = None
    final_score: float | None = None

    def score(self, mode: str) -> float:
        if mode == "cls":
            return self.cls_score
        if mode == "cls_x_conf":
            if self.conf_score is None:
                raise ValueError("cls_x_conf scoring needs a confidence score on every detection")
            return self.cls_score * self.conf_score
        raise ValueError(f"unknown score mode {mode!r}")


def nms_indices(boxes: np.ndarray, labels: np.ndarray, scores: np.ndarray, iou_thr: float = 0.5) -> np.ndarray:
    """Indices kept by greedy same-class suppression, in descending score order.

    Ties in score are broken by the lower input index.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    labels = np.asarray(labels)
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (labels == labels[i]) & (ious[i] > iou_thr)
    return np.array(keep, dtype=int)


def nms(dets: list[Detection], iou_thr: float = 0.5, score_mode: str = "cls") -> list[Detection]:
    if not dets:
        return []
    scores = np.array([d.score(score_mode) for d in dets])
    keep = nms_indices(np.array([d.box for d in dets]), np.array([d.cls for d in dets]), scores, iou_thr)
    out = []
    for i in keep:
        d = dets[i]
        out.append(Detection(d.box, d.cls, d.cls_score, d.conf_score, float(scores[i])))
    return out


def postprocess(cls_logits: np.ndarray, deltas: np.ndarray, conf_logits: np.ndarray | None, anchors: np.ndarray,
                cfg, image_size: tuple[int, int]) -> list[Detection]:
    """Score floor, top-k, decode, NMS and final top ``cfg.max_dets``."""
    probs = _sigmoid(cls_logits)
    conf = _sigmoid(conf_logits[:, 0]) if conf_logits is not None else None
    final = probs * conf[:, None] if cfg.score_mode == "cls_x_conf" else probs
    flat = final.ravel()
    cand = np.flatnonzero(flat > cfg.score_floor)
    if cand.size == 0:
        return []
    cand = cand[np.argsort(-flat[cand], kind="stable")][: cfg.pre_nms_top]
    a_idx, c_idx = np.divmod(cand, final.shape[1])
    boxes = decode_boxes(anchors[a_idx], deltas[a_idx], image_size)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, a_idx, c_idx, cand = boxes[ok], a_idx[ok], c_idx[ok], cand[ok]
    keep = nms_indices(boxes, c_idx, flat[cand], cfg.nms_iou)[: cfg.max_dets]
    out = []
    for i in keep:
        a = a_idx[i]
        out.append(Detection(
            tuple(float(v) for v in boxes[i]), int(c_idx[i]), float(probs[a, c_idx[i]]),
            None if conf is None else float(conf[a]), float(flat[cand[i]]),
        ))
    return out
