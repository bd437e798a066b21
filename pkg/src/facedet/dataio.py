"""WIDER FACE annotation format, image loading and a synthetic face corpus."""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import cv2
import numpy as np
from PIL import Image

from facedet.sampling import Sample

ATTRIBUTE_NAMES = ("blur", "expression", "illumination", "invalid", "occlusion", "pose")
ATTRIBUTE_MAX = (2, 1, 1, 1, 2, 1)
DATA_ROOT_ENV = "FACEDET_DATA_ROOT"


class AnnotationParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class AnnotationRecord:
    path: str
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)
    attributes: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def invalid(self) -> np.ndarray:
        return np.array([a[3] == 1 for a in self.attributes], dtype=bool)

    def xyxy(self) -> np.ndarray:
        b = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        return np.concatenate([b[:, :2], b[:, :2] + b[:, 2:]], axis=1)


def parse_wider_annotations(stream: TextIO | str) -> list[AnnotationRecord]:
    """Parse the ``wider_face_*_bbx_gt.txt`` layout.

    Each image is a path line, a count line and ``count`` lines of ten
    integers. Images with zero faces carry one all-zero line, which is
    consumed and dropped.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = [ln.strip() for ln in stream.read().splitlines()]
    records = []
    i = 0
    n = len(lines)
    while i < n:
        if not lines[i]:
            i += 1
            continue
        path = lines[i]
        if i + 1 >= n:
            raise AnnotationParseError(i + 2, f"missing face count for {path!r}")
        try:
            count = int(lines[i + 1])
        except ValueError:
            raise AnnotationParseError(i + 2, f"malformed face count {lines[i + 1]!r}") from None
        if count < 0:
            raise AnnotationParseError(i + 2, f"negative face count {count}")
        i += 2
        rec = AnnotationRecord(path)
        rows = count if count > 0 else 1
        for k in range(rows):
            if i >= n or not lines[i]:
                if count == 0:
                    break
                raise AnnotationParseError(i + 1, f"expected {count} box lines for {path!r}, got {k}")
            parts = lines[i].split()
            if count == 0:
                # placeholder line of a faceless image; only consume it if it is one
                if len(parts) == 10 and all(p.lstrip("-").isdigit() for p in parts):
                    i += 1
                break
            if len(parts) < 10:
                raise AnnotationParseError(i + 1, f"short box record ({len(parts)} fields)")
            try:
                vals = [int(float(p)) for p in parts[:10]]
            except ValueError:
                raise AnnotationParseError(i + 1, "non-numeric box record") from None
            x, y, w, h = vals[:4]
            if w < 0 or h < 0:
                raise AnnotationParseError(i + 1, "negative box size")
            attrs = tuple(vals[4:])
            for name, v, hi in zip(ATTRIBUTE_NAMES, attrs, ATTRIBUTE_MAX):
                if not 0 <= v <= hi:
                    raise AnnotationParseError(i + 1, f"{name} value {v} out of range")
            rec.boxes.append((x, y, w, h))
            rec.attributes.append(attrs)
            i += 1
        records.append(rec)
    return records


def emit_wider_annotations(records: Iterable[AnnotationRecord]) -> str:
    out = []
    for rec in records:
        out.append(rec.path)
        out.append(str(len(rec.boxes)))
        if not rec.boxes:
            out.append(" ".join(["0"] * 10))
        for box, attrs in zip(rec.boxes, rec.attributes):
            out.append(" ".join(str(int(v)) for v in (*box, *attrs)))
    return "\n".join(out) + "\n"


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def resolve_root(root: str | Path) -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, root))


class WiderDataset:
    """Dataset root laid out as ``images/`` plus one annotation file."""

    def __init__(self, root: str | Path, annotation_file: str = "annotations.txt"):
        self.root = resolve_root(root)
        ann = Path(annotation_file)
        if not ann.is_absolute():
            ann = self.root / ann
        with open(ann) as fh:
            self.records = parse_wider_annotations(fh)
        if not self.records:
            raise ValueError(f"no images listed in {ann}")
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, index: int) -> Path:
        return self.root / "images" / self.records[index].path

    def __getitem__(self, index: int) -> Sample:
        rec = self.records[index]
        if index not in self._cache:
            self._cache[index] = load_image(self.image_path(index))
        return Sample(image=self._cache[index], boxes=rec.xyxy(), invalid=rec.invalid, name=rec.path)


# synthetic corpus ------------------------------------------------------------

@dataclass
class SizeLaw:
    """Log-uniform face size law on ``[lo, hi]`` pixels."""

    lo: float = 8.0
    hi: float = 128.0

    def sample(self, rng: np.random.Generator, n: int | None = None):
        return np.exp(rng.uniform(np.log(self.lo), np.log(self.hi), n))

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)
        return np.log(x / self.lo) / np.log(self.hi / self.lo)


def synthetic_records(n_images: int, image_size: tuple[int, int] = (128, 128),
                      faces_per_image: tuple[int, int] = (1, 4), law: SizeLaw | None = None,
                      seed: int = 0, prefix: str = "synthetic") -> list[AnnotationRecord]:
    """Box layouts only: non-overlapping near-square faces inside the image."""
    law = law or SizeLaw()
    rng = np.random.default_rng(seed)
    width, height = image_size
    records = []
    for k in range(n_images):
        n_faces = int(rng.integers(faces_per_image[0], faces_per_image[1] + 1))
        placed: list[tuple[int, int, int, int]] = []
        for _ in range(n_faces):
            for _attempt in range(30):
                s = float(law.sample(rng))
                aspect = rng.uniform(1.0, 1.25)
                w = max(2, int(round(s / np.sqrt(aspect))))
                h = max(2, int(round(s * np.sqrt(aspect))))
                if w >= width or h >= height:
                    continue
                x = int(rng.integers(0, width - w + 1))
                y = int(rng.integers(0, height - h + 1))
                # keep a small gap between faces
                if all(x + w + 2 <= px or px + pw + 2 <= x or y + h + 2 <= py or py + ph + 2 <= y
                       for px, py, pw, ph in placed):
                    placed.append((x, y, w, h))
                    break
        rec = AnnotationRecord(f"{prefix}/{prefix}_{k:05d}.png")
        for box in placed:
            rec.boxes.append(box)
            rec.attributes.append((0, 0, 0, 0, 0, 0))
        records.append(rec)
    return records


def render_image(rec: AnnotationRecord, image_size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Textured background with a bright ellipse (plus dark eye/mouth marks) per face box."""
    width, height = image_size
    coarse = rng.uniform(40, 110, size=(max(2, height // 16), max(2, width // 16), 3))
    bg = cv2.resize(coarse.astype(np.float32), (width, height), interpolation=cv2.INTER_CUBIC)
    bg += rng.normal(0, 12, size=(height, width, 3)).astype(np.float32)
    img = np.clip(bg, 0, 255).astype(np.uint8)
    for (x, y, w, h) in rec.boxes:
        color = tuple(int(c) for c in rng.uniform([200, 150, 110], [255, 200, 160]))
        center = (x + w / 2.0, y + h / 2.0)
        cv2.ellipse(img, (center, (float(w), float(h)), 0.0), color, -1, lineType=cv2.LINE_AA)
        if min(w, h) >= 6:
            r = max(1, int(round(min(w, h) * 0.08)))
            for ex in (x + 0.32 * w, x + 0.68 * w):
                cv2.circle(img, (int(round(ex)), int(round(y + 0.4 * h))), r, (30, 20, 20), -1)
            cv2.line(img, (int(round(x + 0.35 * w)), int(round(y + 0.72 * h))),
                     (int(round(x + 0.65 * w)), int(round(y + 0.72 * h))), (90, 30, 30), max(1, r // 2))
    return img


def size_subsets(records: list[AnnotationRecord], easy_min: float = 24.0,
                 medium_min: float = 12.0) -> dict[str, dict[str, list[int]]]:
    """Nested Easy/Medium/Hard membership by face size (``sqrt(w*h)``)."""
    out: dict[str, dict[str, list[int]]] = {"easy": {}, "medium": {}, "hard": {}}
    for rec in records:
        sizes = [float(np.sqrt(w * h)) for (_, _, w, h) in rec.boxes]
        out["easy"][rec.path] = [i for i, s in enumerate(sizes) if s >= easy_min]
        out["medium"][rec.path] = [i for i, s in enumerate(sizes) if s >= medium_min]
        out["hard"][rec.path] = list(range(len(sizes)))
    return out


def generate_synthetic_dataset(root: str | Path, n_images: int, image_size: tuple[int, int] = (128, 128),
                               faces_per_image: tuple[int, int] = (1, 4), law: SizeLaw | None = None,
                               seed: int = 0, annotation_file: str = "annotations.txt",
                               subset_file: str = "subsets.json") -> list[AnnotationRecord]:
    """Write ``images/*.png``, the annotation file and a size-based subset file."""
    root = Path(root)
    records = synthetic_records(n_images, image_size, faces_per_image, law, seed)
    rng = np.random.default_rng(seed + 1)
    for rec in records:
        target = root / "images" / rec.path
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(render_image(rec, image_size, rng)).save(target, format="PNG")
    (root / annotation_file).write_text(emit_wider_annotations(records))
    (root / subset_file).write_text(json.dumps(size_subsets(records), sort_keys=True, indent=1))
    return records


def load_subsets(path: str | Path) -> dict[str, dict[str, list[int]]]:
    return json.loads(Path(path).read_text())


def default_stats_corpus(seed: int = 0, n_images: int = 400) -> list[tuple[np.ndarray, np.ndarray, tuple[int, int]]]:
    """WIDER-like layout statistics: mostly small faces on 1024x768 images."""
    size = (1024, 768)
    records = synthetic_records(n_images, size, (1, 12), SizeLaw(6.0, 256.0), seed, prefix="stats")
    return [(r.xyxy(), r.invalid, size) for r in records]


def corpus_from_dataset(dataset: "WiderDataset") -> list[tuple[np.ndarray, np.ndarray, tuple[int, int]]]:
    out = []
    for i, rec in enumerate(dataset.records):
        with Image.open(dataset.image_path(i)) as im:
            out.append((rec.xyxy(), rec.invalid, im.size))
    return out
