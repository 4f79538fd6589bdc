"""COCO-style box AP / AR.

IoU thresholds 0.50:0.05:0.95, 101 recall points, size buckets on ground
truth area: small < 32^2, medium < 96^2, large otherwise. Up to 100
detections per image. A metric with no ground truth in its bucket is -1,
as in the COCO toolkit.
"""
from __future__ import annotations

import numpy as np

from ..boxes import iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "S": (0.0, 32.0 ** 2),
    "M": (32.0 ** 2, 96.0 ** 2),
    "L": (96.0 ** 2, float("inf")),
}
METRIC_NAMES = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR", "AR_S", "AR_M", "AR_L")


def _area(b: np.ndarray) -> np.ndarray:
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def _match_image(dets, gts, area_rng):
    """Per-threshold (det_matched, det_ignored) for one image and class."""
    d_boxes = np.array([d[0] for d in dets], dtype=float).reshape(-1, 4)
    g_boxes = np.array(gts, dtype=float).reshape(-1, 4)
    g_area = _area(g_boxes)
    g_ignore = (g_area < area_rng[0]) | (g_area > area_rng[1])
    g_order = np.argsort(g_ignore, kind="stable")
    g_boxes, g_ignore = g_boxes[g_order], g_ignore[g_order]
    ious = iou_matrix(d_boxes, g_boxes) if len(d_boxes) and len(g_boxes) else np.zeros((len(d_boxes), len(g_boxes)))
    d_area = _area(d_boxes)
    d_out = (d_area < area_rng[0]) | (d_area > area_rng[1])
    t = len(IOU_THRESHOLDS)
    matched = np.zeros((t, len(d_boxes)), dtype=bool)
    ignored = np.zeros((t, len(d_boxes)), dtype=bool)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        g_taken = np.zeros(len(g_boxes), dtype=bool)
        for di in range(len(d_boxes)):
            best, m = min(thr, 1 - 1e-10), -1
            for gi in range(len(g_boxes)):
                if g_taken[gi]:
                    continue
                if m > -1 and not g_ignore[m] and g_ignore[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best, m = ious[di, gi], gi
            if m == -1:
                ignored[ti, di] = d_out[di]
                continue
            g_taken[m] = True
            matched[ti, di] = True
            ignored[ti, di] = g_ignore[m]
    return matched, ignored, int((~g_ignore).sum())


def coco_metrics(detections, ground_truths, classes: int, max_dets: int = 100) -> dict[str, float]:
    """``detections[i]``: list of (box, cls, score); ``ground_truths[i]``: list of (box, cls)."""
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground truths must cover the same images")
    if not ground_truths:
        raise ValueError("empty dataset")
    # per (area, class): precision table (T, R) and recall (T,)
    results = {}
    for area_name, rng in AREA_RANGES.items():
        precisions, recalls = [], []
        for k in range(classes):
            scores, tps, ign = [], [], []
            npig = 0
            for dets, gts in zip(detections, ground_truths):
                top = sorted(dets, key=lambda d: -d[2])[:max_dets]
                dk = sorted([d for d in top if d[1] == k], key=lambda d: -d[2])
                gk = [g[0] for g in gts if g[1] == k]
                matched, ignored, n = _match_image(dk, gk, rng)
                npig += n
                scores.extend(d[2] for d in dk)
                tps.append(matched)
                ign.append(ignored)
            if npig == 0:
                continue
            t = len(IOU_THRESHOLDS)
            prec = np.zeros((t, len(RECALL_POINTS)))
            rec = np.zeros(t)
            if scores:
                order = np.argsort(-np.array(scores), kind="mergesort")
                tp_all = np.concatenate(tps, axis=1)[:, order]
                ig_all = np.concatenate(ign, axis=1)[:, order]
                for ti in range(t):
                    keep = ~ig_all[ti]
                    tp = np.cumsum(tp_all[ti][keep])
                    fp = np.cumsum(~tp_all[ti][keep])
                    if tp.size == 0:
                        continue
                    rc = tp / npig
                    pr = tp / np.maximum(tp + fp, np.finfo(float).eps)
                    rec[ti] = rc[-1]
                    pr = np.maximum.accumulate(pr[::-1])[::-1]
                    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
                    ok = idx < len(pr)
                    prec[ti, ok] = pr[idx[ok]]
            precisions.append(prec)
            recalls.append(rec)
        results[area_name] = (np.array(precisions), np.array(recalls))

    def ap(area, ti=None):
        p, _ = results[area]
        if p.size == 0:
            return -1.0
        return float(p.mean() if ti is None else p[:, ti].mean())

    def ar(area):
        _, r = results[area]
        return -1.0 if r.size == 0 else float(r.mean())

    return {
        "AP": ap("all"),
        "AP50": ap("all", 0),
        "AP75": ap("all", 5),
        "AP_S": ap("S"),
        "AP_M": ap("M"),
        "AP_L": ap("L"),
        "AR": ar("all"),
        "AR_S": ar("S"),
        "AR_M": ar("M"),
        "AR_L": ar("L"),
    }
