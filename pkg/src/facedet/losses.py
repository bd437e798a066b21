"""Multi-task objective: dual-shot anchor losses over all context branches,
box-level segmentation and the anchor-free branch."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from facedet.config import LossWeights


def classification_loss(logits: torch.Tensor, labels: torch.Tensor,
                        filter_mask: torch.Tensor | None = None,
                        mining_ratio: float = 3.0,
                        return_counts: bool = False):
    """Softmax cross-entropy with hard-negative mining.

    ``logits`` is ``(B, A, 2)``, ``labels`` ``(B, A)`` with 1 positive, 0
    negative, -1 ignore. ``filter_mask`` (True = keep) removes negatives
    before mining. Per image, the ``min(ratio * max(pos, 1), negatives)``
    highest-loss negatives are kept. The sum is divided by the positive
    count clamped to at least 1.
    """
    if logits.dim() == 2:
        logits, labels = logits[None], labels[None]
        filter_mask = None if filter_mask is None else filter_mask[None]
    pos = labels == 1
    neg = labels == 0
    if filter_mask is not None:
        neg = neg & filter_mask
    ce = F.cross_entropy(logits.reshape(-1, 2), labels.clamp(min=0).long().reshape(-1),
                         reduction="none").view(labels.shape)
    with torch.no_grad():
        num_pos = pos.sum(dim=1)
        num_neg = neg.sum(dim=1)
        k = torch.minimum((mining_ratio * num_pos.clamp(min=1)).floor().long(), num_neg)
        score = torch.where(neg, ce.detach(), torch.full_like(ce, -1.0))
        # stable descending rank: earlier anchors win ties
        order = torch.sort(score, dim=1, descending=True, stable=True).indices
        rank = torch.empty_like(order)
        rank.scatter_(1, order, torch.arange(order.shape[1]).expand_as(order).contiguous())
        hard = neg & (rank < k[:, None])
    keep = pos | hard
    loss = (ce * keep).sum() / num_pos.sum().clamp(min=1)
    if return_counts:
        return loss, int(num_pos.sum()), int(hard.sum())
    return loss


def regression_loss(pred: torch.Tensor, target: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 (beta 1) summed over positive anchors, divided by their count (>= 1)."""
    diff = (pred - target)[positive]
    n = positive.sum().clamp(min=1)
    return F.smooth_l1_loss(diff, torch.zeros_like(diff), reduction="sum", beta=1.0) / n


def segmentation_loss(logits: list[torch.Tensor], targets: list[torch.Tensor]) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy, averaged over levels."""
    terms = [F.binary_cross_entropy_with_logits(l.reshape(t.shape), t, reduction="mean")
             for l, t in zip(logits, targets)]
    return torch.stack(terms).mean()


def side_distance_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU of boxes given as (left, top, right, bottom) distances from a shared point."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    ap = (pl + pr) * (pt + pb)
    at = (tl + tr) * (tt + tb)
    iw = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    ih = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = iw * ih
    return inter / (ap + at - inter).clamp(min=1e-12)


def anchor_free_loss(objectness: torch.Tensor, distances: torch.Tensor,
                     obj_target: torch.Tensor, dist_target: torch.Tensor) -> torch.Tensor:
    """Objectness BCE over all cells plus ``-ln IoU`` averaged over positive cells.

    ``objectness`` is ``(N, 1, H, W)`` logits or ``(N, H, W)``; distances
    ``(N, 4, H, W)``.
    """
    obj = objectness.reshape(obj_target.shape)
    loss = F.binary_cross_entropy_with_logits(obj, obj_target, reduction="mean")
    pos = obj_target > 0.5
    if pos.any():
        p = distances.permute(0, 2, 3, 1)[pos]
        t = dist_target.permute(0, 2, 3, 1)[pos]
        loss = loss - torch.log(side_distance_iou(p, t).clamp(min=1e-12)).mean()
    return loss


def negative_filter(first_logits: torch.Tensor, labels: torch.Tensor, threshold: float) -> torch.Tensor:
    """Keep-mask for second-shot negatives from first-shot face-branch background probability."""
    with torch.no_grad():
        bg = torch.softmax(first_logits.detach().double(), dim=-1)[..., 0]
        return ~((labels == 0) & (bg > threshold))


@dataclass
class LossReport:
    total: torch.Tensor
    cls_first: torch.Tensor
    cls_second: torch.Tensor
    reg_first: torch.Tensor
    reg_second: torch.Tensor
    seg: torch.Tensor
    anchor_free: torch.Tensor
    positive_counts: dict[str, int] = field(default_factory=dict)

    def recompute_total(self, w: LossWeights) -> float:
        # same dtype and operation order as the assembled objective
        t = {f.name: getattr(self, f.name).detach() for f in fields(self) if f.name != "positive_counts"}
        total = t["cls_second"] + w.regression_weight * t["reg_second"]
        total = total + w.first_shot_weight * (t["cls_first"] + w.regression_weight * t["reg_first"])
        if w.segmentation_weight:
            total = total + w.segmentation_weight * t["seg"]
        if w.anchor_free_weight:
            total = total + w.anchor_free_weight * t["anchor_free"]
        return float(total)

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            if f.name != "positive_counts":
                out[f.name] = float(getattr(self, f.name).detach())
        out.update({f"pos_{k}": v for k, v in self.positive_counts.items()})
        return out


def progressive_anchor_loss(cls: dict[str, torch.Tensor], reg: dict[str, torch.Tensor],
                            labels: dict[str, torch.Tensor], offsets: dict[str, torch.Tensor],
                            weights: LossWeights, filter_threshold: float | None = None):
    """Detection terms of both shots, branch-weighted.

    ``cls[shot]`` is ``(B, branches, A, 2)``, ``labels[shot]`` ``(B, branches, A)``,
    ``reg``/``offsets`` ``(B, A, 4)`` for the face branch. Returns the
    branch-weighted ``cls_first, cls_second, reg_first, reg_second`` and the
    positive counts; regression exists for the face branch only.
    """
    terms = {}
    counts = {}
    keep = None
    if filter_threshold is not None:
        keep = negative_filter(cls["first"][:, 0], labels["second"][:, 0], filter_threshold)
    for shot in ("first", "second"):
        total = cls[shot].new_zeros(())
        for b, w in enumerate(weights.context_branch_weights):
            lab = labels[shot][:, b]
            if w == 0 or not (lab >= 0).any():
                continue
            mask = None
            if shot == "second" and keep is not None:
                mask = keep if b == 0 else negative_filter(cls["first"][:, 0], lab, filter_threshold)
            total = total + w * classification_loss(cls[shot][:, b], lab, mask, weights.mining_ratio)
        terms[f"cls_{shot}"] = total
        pos = labels[shot][:, 0] == 1
        terms[f"reg_{shot}"] = weights.context_branch_weights[0] * regression_loss(reg[shot], offsets[shot], pos)
        counts[shot] = int(pos.sum())
    return terms, counts


def multitask_loss(outputs, targets: dict[str, object], weights: LossWeights,
                   use_filter: bool | None = None) -> LossReport:
    """Assemble the full objective from :class:`~facedet.network.HeadOutputs`
    and collated tensor targets (see :func:`facedet.training.collate_targets`)."""
    if use_filter is None:
        use_filter = weights.use_negative_filter
    cls = {s: outputs.cls_flat(s) for s in ("first", "second")}
    reg = {s: outputs.reg_flat(s) for s in ("first", "second")}
    terms, counts = progressive_anchor_loss(
        cls, reg, targets["labels"], targets["offsets"], weights,
        weights.negative_filter_threshold if use_filter else None)
    zero = cls["second"].new_zeros(())
    seg = segmentation_loss(outputs.seg, targets["seg"]) if weights.segmentation_weight else zero
    af = (anchor_free_loss(outputs.af_obj, outputs.af_dist, targets["af_obj"], targets["af_dist"])
          if weights.anchor_free_weight else zero)
    beta = weights.first_shot_weight
    rw = weights.regression_weight
    total = terms["cls_second"] + rw * terms["reg_second"] + beta * (terms["cls_first"] + rw * terms["reg_first"])
    if weights.segmentation_weight:
        total = total + weights.segmentation_weight * seg
    if weights.anchor_free_weight:
        total = total + weights.anchor_free_weight * af
    return LossReport(total=total, seg=seg, anchor_free=af, positive_counts=counts, **terms)
