"""WIDER-style scoring: greedy IoU matching with ignore regions, PR curves,
AP and Easy/Medium/Hard subset evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from facedet.dataio import AnnotationRecord
from facedet.geometry import iou_matrix

log = logging.getLogger(__name__)

TP, FP, IGNORED = 1, 0, -1
SUBSETS = ("easy", "medium", "hard")


def match_detections(dets: np.ndarray, gts: np.ndarray, ignore: np.ndarray | None = None,
                     iou_threshold: float = 0.5) -> np.ndarray:
    """Label each detection TP (1), FP (0) or IGNORED (-1).

    ``dets`` must be sorted by descending score. A detection takes the
    highest-IoU ground truth among those still available (unmatched, or
    ignore-flagged, which never get used up) with IoU >= threshold; lowest
    GT index wins ties. Landing on an ignore region makes it IGNORED.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    ignore = np.zeros(len(gts), dtype=bool) if ignore is None else np.asarray(ignore, dtype=bool)
    status = np.full(len(dets), FP, dtype=np.int8)
    if len(dets) == 0 or len(gts) == 0:
        return status
    overlaps = iou_matrix(dets, gts)
    used = np.zeros(len(gts), dtype=bool)
    for d in range(len(dets)):
        avail = (overlaps[d] >= iou_threshold) & (ignore | ~used)
        if not avail.any():
            continue
        g = int(np.argmax(np.where(avail, overlaps[d], -1.0)))
        if ignore[g]:
            status[d] = IGNORED
        else:
            status[d] = TP
            used[g] = True
    return status


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds.tolist(), "precision": self.precision.tolist(),
                "recall": self.recall.tolist(), "ap": self.ap}


def rectangular_ap(recall: Sequence[float], precision: Sequence[float]) -> float:
    """Area under the precision envelope summed over recall increments."""
    mrec = np.concatenate([[0.0], np.asarray(recall, dtype=np.float64), [1.0]])
    mpre = np.concatenate([[0.0], np.asarray(precision, dtype=np.float64), [0.0]])
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def score_thresholds(scores: np.ndarray, num_thresholds: int = 1000) -> np.ndarray:
    """Descending cut points taken from the pooled scores themselves.

    Using ranks rather than a fixed score grid keeps the curve invariant
    under monotone score transforms.
    """
    uniq = np.unique(np.asarray(scores, dtype=np.float64))[::-1]
    if len(uniq) <= num_thresholds:
        return uniq
    pick = np.round(np.linspace(0, len(uniq) - 1, num_thresholds)).astype(int)
    return uniq[pick]


def pr_curve(scores: np.ndarray, status: np.ndarray, num_positives: int,
             num_thresholds: int = 1000) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64)
    status = np.asarray(status)
    if num_positives <= 0 or len(scores) == 0:
        return PRCurve(np.zeros(0), np.zeros(0), np.zeros(0), 0.0)
    thr = score_thresholds(scores, num_thresholds)
    counted = status != IGNORED
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    cum_prop = np.cumsum(counted[order])
    cum_tp = np.cumsum(status[order] == TP)
    # number of detections with score >= t
    n_above = np.searchsorted(-s_sorted, -thr, side="right")
    props = cum_prop[n_above - 1]
    tps = cum_tp[n_above - 1]
    precision = np.where(props > 0, tps / np.maximum(props, 1), 1.0)
    recall = tps / float(num_positives)
    return PRCurve(thr, precision, recall, rectangular_ap(recall, precision))


def average_precision(scores, status, num_positives: int, num_thresholds: int = 1000) -> float:
    return pr_curve(scores, status, num_positives, num_thresholds).ap


Detections = Mapping[str, tuple[np.ndarray, np.ndarray]]


def evaluate(detections: Detections, annotations: Sequence[AnnotationRecord],
             keep: Mapping[str, Sequence[int]] | None = None, iou_threshold: float = 0.5,
             num_thresholds: int = 1000) -> PRCurve | None:
    """Pool matches over the dataset. GTs outside ``keep`` (and invalid ones) are ignore regions.

    Returns ``None`` when no ground truth is counted.
    """
    all_scores, all_status = [], []
    positives = 0
    for rec in annotations:
        gts = rec.xyxy()
        ignore = rec.invalid.copy() if len(gts) else np.zeros(0, dtype=bool)
        if keep is not None:
            in_subset = np.zeros(len(gts), dtype=bool)
            in_subset[list(keep.get(rec.path, []))] = True
            ignore |= ~in_subset
        positives += int((~ignore).sum())
        if rec.path not in detections:
            log.warning("no detections for %s; treating as empty", rec.path)
            continue
        boxes, scores = detections[rec.path]
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        order = np.argsort(-scores, kind="stable")
        all_status.append(match_detections(boxes[order], gts, ignore, iou_threshold))
        all_scores.append(scores[order])
    if positives == 0:
        return None
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    status = np.concatenate(all_status) if all_status else np.zeros(0, dtype=np.int8)
    return pr_curve(scores, status, positives, num_thresholds)


def evaluate_subsets(detections: Detections, annotations: Sequence[AnnotationRecord],
                     subset_lists: Mapping[str, Mapping[str, Sequence[int]]],
                     iou_threshold: float = 0.5, num_thresholds: int = 1000) -> dict[str, PRCurve | None]:
    out: dict[str, PRCurve | None] = {}
    for name in SUBSETS:
        members = subset_lists.get(name)
        if not members or not any(len(v) for v in members.values()):
            out[name] = None
            continue
        out[name] = evaluate(detections, annotations, members, iou_threshold, num_thresholds)
    return out


def metrics_json(curves: Mapping[str, PRCurve | None]) -> dict:
    return {
        **{k: (None if c is None else c.ap) for k, c in curves.items()},
        "curves": {k: c.to_dict() for k, c in curves.items() if c is not None},
    }


def write_metrics(path: str | Path, curves: Mapping[str, PRCurve | None]) -> None:
    Path(path).write_text(json.dumps(metrics_json(curves), indent=1))


# detection file --------------------------------------------------------------

def write_detection_file(path: str | Path, detections: Detections) -> None:
    lines = []
    for name, (boxes, scores) in detections.items():
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        lines.append(name)
        lines.append(str(len(boxes)))
        for b, s in zip(boxes, np.asarray(scores).reshape(-1)):
            lines.append(f"{b[0]:.3f} {b[1]:.3f} {b[2] - b[0]:.3f} {b[3] - b[1]:.3f} {float(s):.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_detection_file(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    out = {}
    i = 0
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        name = lines[i]
        try:
            count = int(lines[i + 1])
            rows = np.array([[float(v) for v in lines[i + 2 + k].split()[:5]] for k in range(count)],
                            dtype=np.float64).reshape(-1, 5)
        except (IndexError, ValueError) as exc:
            raise ValueError(f"malformed detection file near line {i + 1}: {exc}") from None
        boxes = np.concatenate([rows[:, :2], rows[:, :2] + rows[:, 2:4]], axis=1)
        out[name] = (boxes, rows[:, 4])
        i += 2 + count
    return out


# plotting --------------------------------------------------------------------

def emit_pr_plot(curves: Mapping[str, PRCurve | None], path: str | Path, method: str = "ours") -> Path:
    """One panel per subset, legend entries ``"<method> (<AP>)"``.

    SVG output keeps text as text, so legend entries remain greppable.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    present = [(k, c) for k, c in curves.items() if c is not None]
    if not present:
        raise ValueError("need at least one curve to plot")
    path = Path(path)
    with matplotlib.rc_context({"svg.fonttype": "none"}):
        fig, axes = plt.subplots(1, len(present), figsize=(4.2 * len(present), 4), squeeze=False)
        for ax, (name, c) in zip(axes[0], present):
            ax.plot(c.recall, c.precision, lw=2, label=f"{method} ({c.ap:.3f})")
            ax.set_title(name.capitalize())
            ax.set_xlabel("Recall")
            ax.set_ylabel("Precision")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1.02)
            ax.grid(alpha=0.3)
            ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
