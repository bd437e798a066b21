"""Box arithmetic: IoU, offset encoding/decoding and greedy NMS.

Boxes are corner-form ``(x_min, y_min, x_max, y_max)`` continuous floats;
width is ``x_max - x_min`` (no +1 pixel convention). Array functions take
``(N, 4)`` arrays, the scalar helpers take :class:`BBox`.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_VARIANCES = (0.1, 0.2)


class BBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def area(self) -> float:
        return self.width * self.height

    def is_valid(self) -> bool:
        vals = np.asarray(self, dtype=np.float64)
        return bool(np.all(np.isfinite(vals)) and self.x_max >= self.x_min and self.y_max >= self.y_min)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(float(x), float(y), float(x + w), float(y + h))

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.width, self.height)


def as_boxes(boxes: Sequence | np.ndarray) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays.

    Zero-area pairs (empty union) have IoU 0.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: BBox | Sequence[float], b: BBox | Sequence[float]) -> float:
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def _center_size(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray,
                 variances: Sequence[float] = DEFAULT_VARIANCES) -> np.ndarray:
    """Center/log-size offsets of ``gt`` relative to ``anchors``, divided by the variances."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    acx, acy, aw, ah = _center_size(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    gcx, gcy, gw, gh = _center_size(gt)
    cv, sv = variances
    return np.stack([
        (gcx - acx) / (aw * cv),
        (gcy - acy) / (ah * cv),
        np.log(gw / aw) / sv,
        np.log(gh / ah) / sv,
    ], axis=-1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray,
                 variances: Sequence[float] = DEFAULT_VARIANCES,
                 clip_to: tuple[float, float] | None = None) -> np.ndarray:
    """Inverse of :func:`encode_boxes`. ``clip_to=(width, height)`` clamps to the image."""
    offsets = np.asarray(offsets, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    acx, acy, aw, ah = _center_size(anchors)
    cv, sv = variances
    cx = acx + offsets[..., 0] * cv * aw
    cy = acy + offsets[..., 1] * cv * ah
    w = aw * np.exp(offsets[..., 2] * sv)
    h = ah * np.exp(offsets[..., 3] * sv)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if clip_to is not None:
        out = clip_boxes(out, clip_to)
    return out


def encode(gt: BBox, anchor: BBox, variances: Sequence[float] = DEFAULT_VARIANCES) -> tuple[float, ...]:
    return tuple(float(v) for v in encode_boxes(np.asarray(gt), np.asarray(anchor), variances))


def decode(off: Sequence[float], anchor: BBox,
           variances: Sequence[float] = DEFAULT_VARIANCES,
           clip_to: tuple[float, float] | None = None) -> BBox:
    return BBox(*(float(v) for v in decode_boxes(np.asarray(off), np.asarray(anchor), variances, clip_to)))


def clip_boxes(boxes: np.ndarray, size: tuple[float, float]) -> np.ndarray:
    w, h = size
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 0::2] = np.clip(out[..., 0::2], 0, w)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, h)
    return out


def scale_about_center(boxes: np.ndarray, ratio: float | np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = _center_size(boxes)
    w = w * ratio
    h = h * ratio
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                top_k: int | None = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    Equal scores keep input order. A box is suppressed when its IoU with an
    already kept box is strictly greater than ``iou_threshold``.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    areas = box_area(boxes)
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if top_k is not None and len(keep) >= top_k:
            break
        rest = order[1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ovr = np.zeros_like(inter)
        np.divide(inter, union, out=ovr, where=union > 0)
        order = rest[ovr <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(detections: Sequence[tuple[BBox, float]], iou_threshold: float,
        top_k: int | None = None) -> list[tuple[BBox, float]]:
    if len(detections) == 0:
        return []
    boxes = np.asarray([d[0] for d in detections], dtype=np.float64)
    scores = np.asarray([d[1] for d in detections], dtype=np.float64)
    keep = nms_indices(boxes, scores, iou_threshold, top_k)
    return [(BBox(*detections[i][0]), float(detections[i][1])) for i in keep]
