"""Brute-force references, written as plain Python loops over scalars.

They share no code with the package so a bug cannot cancel itself out.
"""

from __future__ import annotations

import math


def iou_scalar(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_reference(boxes, scores, threshold: float) -> list[int]:
    """O(n^2) greedy NMS: visit by descending score (input order on ties)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou_scalar(boxes[i], boxes[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


def greedy_match_reference(dets, gts, ignore, threshold: float = 0.5) -> list[int]:
    """1 = tp, 0 = fp, -1 = ignored. Same greedy law, exhaustive scan per detection."""
    used = [False] * len(gts)
    out = []
    for d in dets:
        best, best_g = -1.0, -1
        for g, gt in enumerate(gts):
            if used[g] and not ignore[g]:
                continue
            o = iou_scalar(d, gt)
            if o >= threshold and o > best:
                best, best_g = o, g
        if best_g < 0:
            out.append(0)
        elif ignore[best_g]:
            out.append(-1)
        else:
            used[best_g] = True
            out.append(1)
    return out


def match_reference(faces, anchors, ratio, primary=0.35, compensate=0.1, top_n=6) -> list[int]:
    """Per-anchor face index (-1 = negative) under the two-stage rule."""
    regions = []
    for f in faces:
        cx, cy = (f[0] + f[2]) / 2, (f[1] + f[3]) / 2
        w, h = (f[2] - f[0]) * ratio, (f[3] - f[1]) * ratio
        regions.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    table = [[iou_scalar(a, r) for r in regions] for a in anchors]
    matched = [-1] * len(anchors)
    for k, row in enumerate(table):
        if not row:
            continue
        best = max(row)
        if best >= primary:
            matched[k] = row.index(best)
    for f in range(len(faces)):
        if f in matched:
            continue
        cand = [k for k in range(len(anchors)) if matched[k] < 0 and table[k][f] >= compensate]
        cand.sort(key=lambda k: (-table[k][f], k))
        for k in cand[:top_n]:
            matched[k] = f
    return matched


def rectangular_ap_reference(statuses, num_gt: int) -> float:
    """AP over a ranked list via the precision envelope and recall steps."""
    tp = fp = 0
    points = []
    for s in statuses:
        if s == 1:
            tp += 1
        elif s == 0:
            fp += 1
        else:
            continue
        points.append((tp / num_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    for i, (r, _) in enumerate(points):
        if r > prev_recall:
            envelope = max(p for _, p in points[i:])
            ap += (r - prev_recall) * envelope
            prev_recall = r
    return ap


def central_difference(f, x, eps: float = 1e-6):
    """Numerical gradient of scalar ``f`` at the flat float64 list ``x``."""
    grad = []
    for i in range(len(x)):
        hi = list(x)
        lo = list(x)
        hi[i] += eps
        lo[i] -= eps
        grad.append((f(hi) - f(lo)) / (2 * eps))
    return grad


def relative_error(a, b) -> float:
    num = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    den = max(math.sqrt(sum(x * x for x in a)), math.sqrt(sum(y * y for y in b)), 1e-12)
    return num / den
