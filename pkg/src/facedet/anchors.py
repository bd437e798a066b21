"""Anchor pyramids for both shots, context-region labels and target building."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from facedet.config import DetectorConfig, MatchConfig
from facedet.geometry import encode_boxes, iou_matrix, scale_about_center
from facedet.sampling import Sample, face_sizes

SHOTS = ("first", "second")

NEGATIVE, POSITIVE, IGNORE = 0, 1, -1


@dataclass(frozen=True)
class AnchorGrid:
    level: int
    shot: str
    stride: int
    anchor_size: float
    rows: int
    cols: int
    boxes: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.rows * self.cols


def grid_anchors(rows: int, cols: int, stride: float, size: float) -> np.ndarray:
    """Row-major square anchors centered at ``(stride*(j+0.5), stride*(i+0.5))``."""
    ys, xs = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    cx = stride * (xs.reshape(-1) + 0.5)
    cy = stride * (ys.reshape(-1) + 0.5)
    half = 0.5 * size
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1).astype(np.float64)


@dataclass(frozen=True)
class AnchorPyramid:
    image_size: int
    grids: tuple[AnchorGrid, ...]

    def shot(self, shot: str) -> list[AnchorGrid]:
        return [g for g in self.grids if g.shot == shot]

    def boxes(self, shot: str) -> np.ndarray:
        return np.concatenate([g.boxes for g in self.shot(shot)], axis=0)

    def level_slices(self) -> list[slice]:
        out, start = [], 0
        for g in self.shot("second"):
            out.append(slice(start, start + len(g)))
            start += len(g)
        return out

    @property
    def num_anchors(self) -> int:
        return sum(len(g) for g in self.shot("second"))

    @property
    def num_levels(self) -> int:
        return len(self.shot("second"))


def build_anchor_pyramid(image_size: int, cfg: DetectorConfig) -> AnchorPyramid:
    strides = cfg.anchors.strides
    if image_size <= 0 or image_size % max(strides) != 0:
        raise ValueError(f"image size {image_size} is not divisible by the largest stride {max(strides)}")
    grids = []
    for shot in SHOTS:
        for level, (stride, size) in enumerate(zip(strides, cfg.anchors.sizes)):
            size = float(size) if shot == "second" else 0.5 * float(size)
            n = image_size // stride
            grids.append(AnchorGrid(level, shot, stride, size, n, n, grid_anchors(n, n, stride, size)))
    return AnchorPyramid(image_size, tuple(grids))


def context_region(face, ratio: float) -> np.ndarray:
    """Face box scaled by ``ratio`` about its center (head ~2x, body ~4x)."""
    if ratio < 1:
        raise ValueError("context ratio must be >= 1")
    return scale_about_center(np.asarray(face, dtype=np.float64), ratio)


@dataclass
class MatchResult:
    labels: np.ndarray     # int8, NEGATIVE / POSITIVE
    matched: np.ndarray    # face index per anchor, -1 when unmatched
    overlaps: np.ndarray   # (anchors, faces) IoU against the context regions
    compensated: np.ndarray  # bool, positives added by the second stage


def match(faces, anchors, branch_ratio: float, mc: MatchConfig) -> MatchResult:
    """Two-stage matching of ``anchors`` to context regions of ``faces``.

    Stage one: an anchor whose best IoU reaches ``primary_iou`` is positive
    for its argmax face (lowest face index on ties). Stage two: faces left
    without positives take their ``compensate_top_n`` best still-free
    anchors among those with IoU >= ``compensate_iou`` (faces in index order,
    anchor ties broken by lower index).
    """
    if isinstance(anchors, AnchorGrid):
        anchors = anchors.boxes
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    faces = np.asarray(faces, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    compensated = np.zeros(n, dtype=bool)
    if len(faces) == 0:
        return MatchResult(labels, matched, np.zeros((n, 0)), compensated)
    overlaps = iou_matrix(anchors, context_region(faces, branch_ratio))
    best = overlaps.max(axis=1)
    arg = overlaps.argmax(axis=1)
    pos = best >= mc.primary_iou
    matched[pos] = arg[pos]
    counts = np.bincount(arg[pos], minlength=len(faces))
    for f in np.flatnonzero(counts == 0):
        col = overlaps[:, f]
        cand = np.flatnonzero((matched < 0) & (col >= mc.compensate_iou))
        if len(cand) == 0:
            continue
        order = np.lexsort((cand, -col[cand]))
        take = cand[order[:mc.compensate_top_n]]
        matched[take] = f
        compensated[take] = True
    labels[matched >= 0] = POSITIVE
    return MatchResult(labels, matched, overlaps, compensated)


@dataclass
class TargetSet:
    """Encoded training targets for one sample.

    ``labels[shot]`` is ``(branches, anchors)`` in {-1, 0, 1}; ``offsets[shot]``
    holds face-branch regression targets; ``seg`` has one map per level;
    ``af_obj`` / ``af_dist`` are the anchor-free maps at the designated level.
    """

    labels: dict[str, np.ndarray]
    offsets: dict[str, np.ndarray]
    matched: dict[str, np.ndarray]
    seg: list[np.ndarray]
    af_obj: np.ndarray
    af_dist: np.ndarray


def assign_levels(sizes: np.ndarray, anchor_sizes) -> np.ndarray:
    """Level whose anchor size is nearest in log space."""
    sizes = np.asarray(sizes, dtype=np.float64)
    logs = np.log(np.asarray(anchor_sizes, dtype=np.float64))
    return np.abs(np.log(np.clip(sizes, 1e-12, None))[:, None] - logs[None]).argmin(axis=1)


def cell_centers(rows: int, cols: int, stride: float) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return stride * (xs + 0.5), stride * (ys + 0.5)


def segmentation_targets(faces: np.ndarray, pyramid: AnchorPyramid, cfg: DetectorConfig) -> list[np.ndarray]:
    grids = pyramid.shot("second")
    maps = [np.zeros((g.rows, g.cols), dtype=np.float32) for g in grids]
    if len(faces) == 0:
        return maps
    levels = assign_levels(face_sizes(faces), cfg.anchors.sizes)
    for face, level in zip(faces, levels):
        g = grids[level]
        cx, cy = cell_centers(g.rows, g.cols, g.stride)
        inside = (cx >= face[0]) & (cx <= face[2]) & (cy >= face[1]) & (cy <= face[3])
        maps[level][inside] = 1.0
    return maps


def anchor_free_targets(faces: np.ndarray, image_size: int, cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Objectness and (left, top, right, bottom) distance maps.

    Cells whose centers fall in the box shrunk to ``anchor_free_shrink`` of
    its size are positive; a face covering no such center claims the cell
    holding its center. Smaller faces win on overlap.
    """
    stride = cfg.anchors.strides[cfg.network.anchor_free_level]
    n = image_size // stride
    obj = np.zeros((n, n), dtype=np.float32)
    dist = np.zeros((4, n, n), dtype=np.float32)
    if len(faces) == 0:
        return obj, dist
    cx, cy = cell_centers(n, n, stride)
    shrink = cfg.network.anchor_free_shrink
    areas = (faces[:, 2] - faces[:, 0]) * (faces[:, 3] - faces[:, 1])
    for f in np.argsort(-areas, kind="stable"):
        box = faces[f]
        core = scale_about_center(box, shrink)
        cells = (cx >= core[0]) & (cx <= core[2]) & (cy >= core[1]) & (cy <= core[3])
        if not cells.any():
            mx, my = 0.5 * (box[0] + box[2]), 0.5 * (box[1] + box[3])
            j = min(int(mx // stride), n - 1)
            i = min(int(my // stride), n - 1)
            cells = np.zeros_like(cells)
            cells[i, j] = True
        obj[cells] = 1.0
        d = np.stack([cx - box[0], cy - box[1], box[2] - cx, box[3] - cy])
        dist[:, cells] = np.clip(d[:, cells], 0, None)
    return obj, dist


def build_targets(sample: Sample, pyramid: AnchorPyramid, mc: MatchConfig,
                  cfg: DetectorConfig) -> TargetSet:
    boxes = sample.boxes
    sizes = face_sizes(boxes)
    usable = sizes > 0
    faces = boxes[usable & ~sample.invalid]
    ignored = boxes[usable & sample.invalid]
    variances = cfg.anchors.variances
    labels, offsets, matched = {}, {}, {}
    for shot in SHOTS:
        anchors = pyramid.boxes(shot)
        shot_labels = np.zeros((len(mc.context_ratios), len(anchors)), dtype=np.int8)
        for b, ratio in enumerate(mc.context_ratios):
            if shot == "first" and b > 0 and not cfg.anchors.first_shot_context:
                shot_labels[b] = IGNORE
                continue
            res = match(faces, anchors, ratio, mc)
            lab = res.labels.copy()
            if len(ignored):
                near = iou_matrix(anchors, context_region(ignored, ratio)).max(axis=1) > mc.ignore_iou
                lab[near & (lab != POSITIVE)] = IGNORE
            shot_labels[b] = lab
            if b == 0:
                off = np.zeros((len(anchors), 4), dtype=np.float32)
                pos = res.matched >= 0
                if pos.any():
                    off[pos] = encode_boxes(faces[res.matched[pos]], anchors[pos], variances)
                offsets[shot] = off
                matched[shot] = res.matched
        labels[shot] = shot_labels
    seg = segmentation_targets(faces, pyramid, cfg)
    af_obj, af_dist = anchor_free_targets(faces, pyramid.image_size, cfg)
    return TargetSet(labels, offsets, matched, seg, af_obj, af_dist)


def negative_filter_mask(background_probs, labels, threshold: float = 0.99) -> np.ndarray:
    """True where an anchor stays in the second-shot classification pool.

    Negatives whose first-shot background probability is strictly above
    ``threshold`` are dropped; positives and ignores are never touched here.
    """
    probs = np.asarray(background_probs)
    labels = np.asarray(labels)
    return ~((labels == NEGATIVE) & (probs > threshold))
