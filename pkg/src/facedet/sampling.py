"""Training-time sampling: SSD random crops, data-anchor-sampling (DAS) and
balanced data-anchor-sampling (BDAS), plus photometric distortion and flips.

BDAS and DAS share the target-index law (uniform over
``{0, ..., min(last, nearest + 1)}``); they differ in how the size is drawn
inside ``[lo * a, hi * a]``: BDAS draws it uniformly, DAS log-uniformly
(scale ``2 ** U(-1, 1)`` for the default interval), which leans towards the
small end.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from facedet.config import SamplerConfig
from facedet.geometry import iou_matrix

SSD_MIN_IOUS = (0.1, 0.3, 0.5, 0.7, 0.9)


class Strategy(str, enum.Enum):
    BDAS = "bdas"
    DAS = "das"
    SSD = "ssd"


@dataclass
class Sample:
    """One image with its face boxes.

    ``invalid`` marks boxes that are carried along but excluded from target
    assignment (they become ignore regions). ``meta`` records what the
    sampler did, for inspection and tests.
    """

    image: np.ndarray
    boxes: np.ndarray
    invalid: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.invalid is None:
            self.invalid = np.zeros(len(self.boxes), dtype=bool)
        self.invalid = np.asarray(self.invalid, dtype=bool).reshape(-1)
        if len(self.invalid) != len(self.boxes):
            raise ValueError("invalid flags must match the number of boxes")

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


def face_sizes(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = np.clip(boxes[:, 2] - boxes[:, 0], 0, None)
    h = np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    return np.sqrt(w * h)


def select_strategy(rng: np.random.Generator, bdas_probability: float = 0.8) -> Strategy:
    return Strategy.BDAS if rng.random() < bdas_probability else Strategy.SSD


def nearest_anchor_index(face_size: float, anchor_sizes) -> int:
    sizes = np.asarray(anchor_sizes, dtype=np.float64)
    return int(np.argmin(np.abs(sizes - face_size)))


def _target_index(face_size: float, cfg: SamplerConfig, rng: np.random.Generator, cap: bool) -> int:
    last = len(cfg.anchor_sizes) - 1
    upper = min(last, nearest_anchor_index(face_size, cfg.anchor_sizes) + 1) if cap else last
    return int(rng.integers(0, upper + 1))


def bdas_draw(face_size: float, cfg: SamplerConfig, rng: np.random.Generator) -> tuple[int, float]:
    """Return ``(target_index, target_size)`` under the balanced law."""
    if face_size <= 0:
        raise ValueError("face_size must be positive")
    i = _target_index(face_size, cfg, rng, cfg.bdas_index_cap)
    a = float(cfg.anchor_sizes[i])
    return i, float(rng.uniform(a * cfg.size_interval_lo, a * cfg.size_interval_hi))


def das_draw(face_size: float, cfg: SamplerConfig, rng: np.random.Generator) -> tuple[int, float]:
    if face_size <= 0:
        raise ValueError("face_size must be positive")
    i = _target_index(face_size, cfg, rng, True)
    a = float(cfg.anchor_sizes[i])
    log_s = rng.uniform(math.log(a * cfg.size_interval_lo), math.log(a * cfg.size_interval_hi))
    return i, float(math.exp(log_s))


def bdas_target_size(face_size: float, cfg: SamplerConfig, rng: np.random.Generator) -> float:
    return bdas_draw(face_size, cfg, rng)[1]


def das_target_size(face_size: float, cfg: SamplerConfig, rng: np.random.Generator) -> float:
    return das_draw(face_size, cfg, rng)[1]


# geometry-only halves of the crops, shared by image sampling and statistics

def _axis_offset(center: float, extent: float, crop: int, rng: np.random.Generator) -> int:
    # window [x0, x0 + crop] must contain the center; stay inside the image
    # when the image is larger than the crop, cover it fully when smaller
    lo = max(center - crop, min(0.0, extent - crop))
    hi = min(center, max(0.0, extent - crop))
    lo_i, hi_i = math.ceil(lo), math.floor(hi)
    if lo_i > hi_i:
        return int(round(0.5 * (lo + hi)))
    return int(rng.integers(lo_i, hi_i + 1))


def anchor_crop_window(boxes: np.ndarray, selected: int, s_target: float,
                       image_size: tuple[int, int], crop: int,
                       rng: np.random.Generator) -> tuple[float, int, int]:
    """Scale factor and crop offset (in resized coordinates) for anchor-based sampling."""
    width, height = image_size
    scale = s_target / float(face_sizes(boxes[selected:selected + 1])[0])
    b = boxes[selected] * scale
    cx, cy = 0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])
    x0 = _axis_offset(cx, width * scale, crop, rng)
    y0 = _axis_offset(cy, height * scale, crop, rng)
    return scale, x0, y0


def transform_boxes(boxes: np.ndarray, scale: float, x0: float, y0: float,
                    crop: int) -> tuple[np.ndarray, np.ndarray]:
    """Scale, translate, drop boxes whose center leaves the crop, clip the rest.

    Returns the kept boxes and the boolean keep mask over the inputs.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * scale
    b = b - np.array([x0, y0, x0, y0])
    cx = 0.5 * (b[:, 0] + b[:, 2])
    cy = 0.5 * (b[:, 1] + b[:, 3])
    keep = (cx >= 0) & (cx <= crop) & (cy >= 0) & (cy <= crop)
    b = np.clip(b[keep], 0, crop)
    area_ok = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
    idx = np.flatnonzero(keep)
    keep[idx[~area_ok]] = False
    return b[area_ok], keep


def ssd_crop_window(boxes: np.ndarray, image_size: tuple[int, int], cfg: SamplerConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, float | None]:
    """Pick an SSD-style crop ``(x0, y0, x1, y1)`` in source pixels.

    The chosen constraint is returned alongside (``None`` for the whole
    image). A constrained crop requires at least one face centered inside it
    and every such face to overlap the crop with IoU >= the constraint.
    """
    width, height = image_size
    whole = np.array([0.0, 0.0, float(width), float(height)])
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    choice = int(rng.integers(0, len(SSD_MIN_IOUS) + 2))
    if choice == 0 or len(boxes) == 0:
        return whole, None
    min_iou = -math.inf if choice == len(SSD_MIN_IOUS) + 1 else SSD_MIN_IOUS[choice - 1]
    n = cfg.ssd_max_trials
    # all trials drawn up front so the stream length does not depend on the outcome
    w = rng.uniform(0.3 * width, width, n)
    h = rng.uniform(0.3 * height, height, n)
    fx = rng.random(n)
    fy = rng.random(n)
    left = fx * (width - w)
    top = fy * (height - h)
    rects = np.stack([left, top, left + w, top + h], axis=1)
    aspect_ok = (h / w >= 0.5) & (h / w <= 2.0)
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    inside = ((cx[None] > rects[:, 0:1]) & (cx[None] < rects[:, 2:3])
              & (cy[None] > rects[:, 1:2]) & (cy[None] < rects[:, 3:4]))
    overlaps = iou_matrix(rects, boxes)
    worst = np.where(inside, overlaps, np.inf).min(axis=1)
    ok = aspect_ok & inside.any(axis=1) & (worst >= min_iou)
    hits = np.flatnonzero(ok)
    if len(hits) == 0:
        return whole, None
    return rects[hits[0]], float(min_iou)


# image operations --------------------------------------------------------

def _warp(image: np.ndarray, scale: float, x0: float, y0: float, crop: int) -> np.ndarray:
    m = np.array([[scale, 0.0, -x0], [0.0, scale, -y0]], dtype=np.float64)
    interp = cv2.INTER_AREA if scale < 1 else cv2.INTER_LINEAR
    return cv2.warpAffine(image, m, (crop, crop), flags=interp,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def _finish(sample: Sample, image: np.ndarray, scale: float, x0: float, y0: float,
            crop: int, meta: dict) -> Sample:
    boxes, keep = transform_boxes(sample.boxes, scale, x0, y0, crop)
    meta = dict(sample.meta, **meta, scale=scale, offset=(x0, y0), keep=keep)
    return Sample(image=image, boxes=boxes, invalid=sample.invalid[keep], name=sample.name, meta=meta)


def ssd_sample(sample: Sample, cfg: SamplerConfig, rng: np.random.Generator) -> Sample:
    """Classic SSD random crop, resized (aspect preserved, zero padded) to ``crop_size``."""
    rect, min_iou = ssd_crop_window(sample.boxes, (sample.width, sample.height), cfg, rng)
    crop = cfg.crop_size
    scale = crop / max(rect[2] - rect[0], rect[3] - rect[1])
    image = _warp(sample.image, scale, rect[0] * scale, rect[1] * scale, crop)
    return _finish(sample, image, scale, rect[0] * scale, rect[1] * scale, crop,
                   {"strategy": Strategy.SSD.value, "window": rect, "min_iou": min_iou})


def scale_and_crop(sample: Sample, selected_face: int, s_target: float, cfg: SamplerConfig,
                   rng: np.random.Generator) -> Sample:
    """Resize so face ``selected_face`` measures ``s_target``, then crop around it.

    Falls back to :func:`ssd_sample` when the selected face is unusable.
    """
    sizes = face_sizes(sample.boxes)
    if (selected_face < 0 or selected_face >= len(sizes) or sample.invalid[selected_face]
            or sizes[selected_face] <= 0):
        return ssd_sample(sample, cfg, rng)
    crop = cfg.crop_size
    scale, x0, y0 = anchor_crop_window(sample.boxes, selected_face, s_target,
                                       (sample.width, sample.height), crop, rng)
    image = _warp(sample.image, scale, x0, y0, crop)
    return _finish(sample, image, scale, x0, y0, crop,
                   {"strategy": Strategy.BDAS.value, "selected": selected_face})


def selectable_faces(sample: Sample) -> np.ndarray:
    return np.flatnonzero(~sample.invalid & (face_sizes(sample.boxes) > 0))


def anchor_sample(sample: Sample, cfg: SamplerConfig, rng: np.random.Generator,
                  law: Strategy = Strategy.BDAS) -> Sample:
    faces = selectable_faces(sample)
    if len(faces) == 0:
        return ssd_sample(sample, cfg, rng)
    selected = int(faces[rng.integers(0, len(faces))])
    size = float(face_sizes(sample.boxes[selected:selected + 1])[0])
    draw = bdas_draw if law == Strategy.BDAS else das_draw
    _, s_target = draw(size, cfg, rng)
    out = scale_and_crop(sample, selected, s_target, cfg, rng)
    out.meta["strategy"] = law.value
    return out


def hflip(sample: Sample) -> Sample:
    w = sample.width
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = w - sample.boxes[:, [2, 0]]
    return Sample(image=np.ascontiguousarray(sample.image[:, ::-1]), boxes=boxes,
                  invalid=sample.invalid.copy(), name=sample.name,
                  meta=dict(sample.meta, flipped=not sample.meta.get("flipped", False)))


def color_distort(image: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter, each applied with probability 1/2."""
    img = image.astype(np.float32)
    if rng.random() < 0.5:
        img += rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    if rng.random() < 0.5:
        img *= rng.uniform(*cfg.contrast_range)
    img = np.clip(img, 0, 255)
    do_sat = rng.random() < 0.5
    sat = rng.uniform(*cfg.saturation_range)
    do_hue = rng.random() < 0.5
    hue = rng.uniform(-cfg.hue_delta, cfg.hue_delta)
    if do_sat or do_hue:
        hsv = cv2.cvtColor(img.astype(np.uint8), cv2.COLOR_RGB2HSV).astype(np.float32)
        if do_sat:
            hsv[..., 1] = np.clip(hsv[..., 1] * sat, 0, 255)
        if do_hue:
            # opencv stores hue in [0, 180)
            hsv[..., 0] = np.mod(hsv[..., 0] + hue / 2.0, 180.0)
        img = cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB).astype(np.float32)
    return np.clip(img, 0, 255).astype(np.uint8)


def fit_to_crop(sample: Sample, crop: int) -> Sample:
    """Deterministic aspect-preserving resize + zero pad to ``crop`` (no augmentation)."""
    if sample.width == crop and sample.height == crop:
        return sample
    scale = crop / max(sample.width, sample.height)
    image = _warp(sample.image, scale, 0.0, 0.0, crop)
    return _finish(sample, image, scale, 0.0, 0.0, crop, {"strategy": "fit"})


def augment(sample: Sample, cfg: SamplerConfig, rng: np.random.Generator) -> Sample:
    """Full training-time pipeline: distort, BDAS/SSD mixture, flip."""
    if not cfg.augment:
        return fit_to_crop(sample, cfg.crop_size)
    image = sample.image
    if rng.random() < cfg.color_distort_probability:
        image = color_distort(image, cfg, rng)
    work = Sample(image=image, boxes=sample.boxes, invalid=sample.invalid, name=sample.name)
    if select_strategy(rng, cfg.bdas_probability) == Strategy.BDAS:
        out = anchor_sample(work, cfg, rng, Strategy.BDAS)
    else:
        out = ssd_sample(work, cfg, rng)
    if rng.random() < cfg.hflip_probability:
        out = hflip(out)
    return out


def worker_rng(base_seed: int, worker_index: int) -> np.random.Generator:
    return np.random.default_rng(base_seed + worker_index)


# statistics ------------------------------------------------------------------

SIZE_BIN_EDGES = tuple([0.0] + [2.0 ** k for k in range(1, 12)] + [float("inf")])


def _draw_sizes(boxes: np.ndarray, invalid: np.ndarray, image_size: tuple[int, int],
                strategy: Strategy, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    crop = cfg.crop_size
    if strategy in (Strategy.BDAS, Strategy.DAS):
        faces = np.flatnonzero(~invalid & (face_sizes(boxes) > 0))
        if len(faces):
            selected = int(faces[rng.integers(0, len(faces))])
            size = float(face_sizes(boxes[selected:selected + 1])[0])
            draw = bdas_draw if strategy == Strategy.BDAS else das_draw
            _, s_target = draw(size, cfg, rng)
            scale, x0, y0 = anchor_crop_window(boxes, selected, s_target, image_size, crop, rng)
            kept, _ = transform_boxes(boxes, scale, x0, y0, crop)
            return face_sizes(kept)
    rect, _ = ssd_crop_window(boxes, image_size, cfg, rng)
    scale = crop / max(rect[2] - rect[0], rect[3] - rect[1])
    kept, _ = transform_boxes(boxes, scale, rect[0] * scale, rect[1] * scale, crop)
    return face_sizes(kept)


def sampler_statistics(corpus, cfg: SamplerConfig, n_draws: int, seed: int = 0,
                       band: tuple[float, float] = (32.0, 128.0),
                       strategies: tuple[str, ...] = ("bdas", "das", "ssd", "mixture")) -> dict:
    """Histogram of output face sizes per sampling strategy.

    ``corpus`` is a list of ``(boxes_xyxy, invalid, (width, height))``. Every
    strategy replays the same seed, so they see the same image choices as
    far as their draw sequences agree.
    """
    report: dict = {"n_draws": int(n_draws), "seed": int(seed), "band": list(band),
                    "bin_edges": [e if np.isfinite(e) else None for e in SIZE_BIN_EDGES],
                    "strategies": {}}
    for name in strategies:
        rng = np.random.default_rng(seed)
        chunks = []
        for _ in range(n_draws):
            boxes, invalid, size = corpus[int(rng.integers(0, len(corpus)))]
            if name == "mixture":
                strategy = select_strategy(rng, cfg.bdas_probability)
            else:
                strategy = Strategy(name)
            chunks.append(_draw_sizes(boxes, invalid, size, strategy, cfg, rng))
        sizes = np.concatenate(chunks) if chunks else np.zeros(0)
        counts, _ = np.histogram(sizes, bins=np.asarray(SIZE_BIN_EDGES))
        in_band = float(np.mean((sizes >= band[0]) & (sizes <= band[1]))) if len(sizes) else None
        report["strategies"][name] = {
            "faces": int(len(sizes)),
            "counts": counts.tolist(),
            "band_fraction": in_band,
            "mean_log2_size": float(np.mean(np.log2(sizes))) if len(sizes) else None,
        }
    return report


def format_statistics(report: dict) -> str:
    edges = report["bin_edges"]
    labels = [f"[{edges[i]:g},{'inf' if edges[i + 1] is None else format(edges[i + 1], 'g')})"
              for i in range(len(edges) - 1)]
    lines = []
    for name, st in report["strategies"].items():
        frac = st["band_fraction"]
        band = report["band"]
        lines.append(f"{name}: {st['faces']} faces, "
                     f"[{band[0]:g},{band[1]:g}] fraction "
                     f"{'n/a' if frac is None else format(frac, '.4f')}")
        total = max(1, st["faces"])
        for label, c in zip(labels, st["counts"]):
            lines.append(f"  {label:>12} {c:8d} {'#' * int(round(40 * c / total))}")
    return "\n".join(lines)
