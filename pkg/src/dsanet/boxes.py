"""Box geometry: IoU, anchor-relative encode/decode.

Boxes are corner form ``(x1, y1, x2, y2)`` in continuous pixel coordinates;
anchors are centre form ``(cx, cy, w, h)``. Areas are ``w * h`` with no +1.
"""
from __future__ import annotations

import math

import numpy as np

MAX_LOG_SCALE = math.log(1000.0 / 16)


def area(b) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def iou(a, b) -> float:
    if area(a) <= 0 or area(b) <= 0:
        raise ValueError(f"zero-area box: {a if area(a) <= 0 else b}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area(a) + area(b) - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) corner boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def centre_to_corners(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    half_w, half_h = c[..., 2] / 2, c[..., 3] / 2
    return np.stack([c[..., 0] - half_w, c[..., 1] - half_h, c[..., 0] + half_w, c[..., 1] + half_h], axis=-1)


def corners_to_centre(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    w, h = b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]
    return np.stack([b[..., 0] + w / 2, b[..., 1] + h / 2, w, h], axis=-1)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) taking centre-form anchors onto corner boxes."""
    a = np.asarray(anchors, dtype=float)
    g = corners_to_centre(boxes)
    return np.stack([
        (g[..., 0] - a[..., 0]) / a[..., 2],
        (g[..., 1] - a[..., 1]) / a[..., 3],
        np.log(g[..., 2] / a[..., 2]),
        np.log(g[..., 3] / a[..., 3]),
    ], axis=-1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Apply deltas to centre-form anchors; clip to ``(height, width)`` if given."""
    a = np.asarray(anchors, dtype=float)
    d = np.asarray(deltas, dtype=float)
    dw = np.minimum(d[..., 2], MAX_LOG_SCALE)
    dh = np.minimum(d[..., 3], MAX_LOG_SCALE)
    cx = a[..., 0] + d[..., 0] * a[..., 2]
    cy = a[..., 1] + d[..., 1] * a[..., 3]
    w = a[..., 2] * np.exp(dw)
    h = a[..., 3] * np.exp(dh)
    out = centre_to_corners(np.stack([cx, cy, w, h], axis=-1))
    if image_size is not None:
        height, width = image_size
        out[..., 0::2] = np.clip(out[..., 0::2], 0, width)
        out[..., 1::2] = np.clip(out[..., 1::2], 0, height)
    return out
