"""Detector graph: backbone, low-level FPN with product fusion, dense context
modules and the dual-shot / segmentation / anchor-free heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from facedet.config import DenseContextConfig, DetectorConfig
from facedet.geometry import BBox, clip_boxes, decode_boxes, nms_indices


@dataclass
class FeatureMap:
    level: int
    stride: int
    values: torch.Tensor

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[2])

    @property
    def width(self) -> int:
        return int(self.values.shape[3])


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), _norm(cout), nn.ReLU(inplace=True))


class PlainBackbone(nn.Module):
    """Strided convolution stack, one stage per pyramid level."""

    def __init__(self, channels: list[int], strides: list[int]):
        super().__init__()
        self.strides = list(strides)
        n_stem = int(round(math.log2(strides[0])))
        if 2 ** n_stem != strides[0]:
            raise ValueError("first stride must be a power of two")
        stages = []
        cin = 3
        for i, cout in enumerate(channels):
            layers = []
            n_down = n_stem if i == 0 else 1
            for _ in range(n_down):
                layers.append(conv_block(cin, cout, 2))
                cin = cout
            if n_down == 0:
                layers.append(conv_block(cin, cout))
            layers.append(conv_block(cout, cout))
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[FeatureMap]:
        out = []
        for level, stage in enumerate(self.stages):
            x = stage(x)
            out.append(FeatureMap(level, self.strides[level], x))
        return out


BACKBONES: dict[str, Callable[[DetectorConfig], nn.Module]] = {
    "plain": lambda cfg: PlainBackbone(cfg.network.backbone_channels, cfg.anchors.strides),
}


def product_fuse(deep: torch.Tensor, shallow: torch.Tensor) -> torch.Tensor:
    """Nearest x2 upsample of ``deep`` times ``shallow`` (both already projected)."""
    up = F.interpolate(deep, scale_factor=2, mode="nearest")
    return up[..., :shallow.shape[-2], :shallow.shape[-1]] * shallow


class LFPNFuse(nn.Module):
    def __init__(self, deep_channels: int, shallow_channels: int, out_channels: int):
        super().__init__()
        self.project_deep = nn.Conv2d(deep_channels, out_channels, 1)
        self.project_shallow = nn.Conv2d(shallow_channels, out_channels, 1)

    def forward(self, deep: FeatureMap, shallow: FeatureMap) -> FeatureMap:
        if deep.level != shallow.level + 1:
            raise ValueError(f"cannot fuse level {deep.level} into level {shallow.level}: not adjacent")
        fused = product_fuse(self.project_deep(deep.values), self.project_shallow(shallow.values))
        return FeatureMap(shallow.level, shallow.stride, fused)


class DenseContextModule(nn.Module):
    """Densely connected prediction block.

    Stage ``l`` (1-based) sees the concatenation of the module input and the
    outputs of stages ``1..l-1``; a 1x1 projection of everything produces
    the output.
    """

    def __init__(self, in_channels: int, cfg: DenseContextConfig):
        super().__init__()
        self.in_channels = in_channels
        self.growth = cfg.growth_channels
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels + l * cfg.growth_channels, cfg.growth_channels,
                          cfg.kernel, padding=cfg.kernel // 2),
                nn.ReLU(),
            )
            for l in range(cfg.stages)
        )
        self.project = nn.Sequential(
            nn.Conv2d(in_channels + cfg.stages * cfg.growth_channels, cfg.projection_channels, 1),
            nn.ReLU(),
        )

    @property
    def stage_in_channels(self) -> list[int]:
        return [self.in_channels + l * self.growth for l in range(len(self.stages))]

    def concat_index_map(self, stage: int) -> dict[str, slice]:
        """Channel slices of stage ``stage``'s input (1-based), keyed by source."""
        out = {"input": slice(0, self.in_channels)}
        for m in range(1, stage):
            start = self.in_channels + (m - 1) * self.growth
            out[f"stage{m}"] = slice(start, start + self.growth)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for stage in self.stages:
            feats.append(stage(torch.cat(feats, dim=1)))
        return self.project(torch.cat(feats, dim=1))


@dataclass
class HeadOutputs:
    cls: dict[str, list[torch.Tensor]]   # (N, branches, 2, H, W) per level
    reg: dict[str, list[torch.Tensor]]   # (N, 4, H, W) per level
    seg: list[torch.Tensor]              # (N, 1, H, W) per level
    af_obj: torch.Tensor                 # (N, 1, H, W)
    af_dist: torch.Tensor                # (N, 4, H, W), pixels, >= 0

    def cls_flat(self, shot: str) -> torch.Tensor:
        """(N, branches, anchors, 2) in anchor-pyramid order."""
        parts = [c.permute(0, 1, 3, 4, 2).flatten(2, 3) for c in self.cls[shot]]
        return torch.cat(parts, dim=2)

    def reg_flat(self, shot: str) -> torch.Tensor:
        parts = [r.permute(0, 2, 3, 1).flatten(1, 2) for r in self.reg[shot]]
        return torch.cat(parts, dim=1)


def _head(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


def _fused_conv(x: torch.Tensor, convs: list[nn.Conv2d]) -> list[torch.Tensor]:
    """Apply several same-input 3x3 heads as one convolution, split per head."""
    weight = torch.cat([c.weight for c in convs], dim=0)
    bias = torch.cat([c.bias for c in convs], dim=0)
    out = F.conv2d(x, weight, bias, padding=1)
    return list(torch.split(out, [c.out_channels for c in convs], dim=1))


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, init: bool = True):
        super().__init__()
        self.cfg = cfg
        net = cfg.network
        n_levels = len(cfg.anchors.strides)
        n_branch = cfg.num_branches
        self.backbone = BACKBONES[net.backbone](cfg)
        bch = net.backbone_channels
        ch = net.lfpn_channels
        self.lateral = nn.ModuleList(nn.Conv2d(bch[l], ch, 1) for l in range(n_levels))
        self.fuse = nn.ModuleDict({
            str(l): LFPNFuse(ch, bch[l], ch) for l in range(net.lfpn_levels)
        })
        self.context = nn.ModuleList(DenseContextModule(ch, net.dense) for _ in range(n_levels))
        pch = net.dense.projection_channels
        self.heads = nn.ModuleDict({
            "first": nn.ModuleDict({
                "cls": nn.ModuleList(nn.ModuleList(_head(bch[l], 2) for _ in range(n_branch))
                                     for l in range(n_levels)),
                "reg": nn.ModuleList(_head(bch[l], 4) for l in range(n_levels)),
            }),
            "second": nn.ModuleDict({
                "cls": nn.ModuleList(nn.ModuleList(_head(pch, 2) for _ in range(n_branch))
                                     for l in range(n_levels)),
                "reg": nn.ModuleList(_head(pch, 4) for _ in range(n_levels)),
            }),
        })
        self.seg_head = nn.ModuleList(_head(pch, 1) for _ in range(n_levels))
        self.af_obj_head = _head(pch, 1)
        self.af_dist_head = _head(pch, 4)
        self.register_buffer("pixel_mean", torch.tensor(net.pixel_mean).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(net.pixel_std).view(1, 3, 1, 1))
        self.ready = False
        if init:
            self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                if self.cfg.network.init == "xavier":
                    nn.init.xavier_uniform_(m.weight)
                else:
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # product fusion starts as identity on the shallow path
        for fuse in self.fuse.values():
            nn.init.zeros_(fuse.project_deep.weight)
            nn.init.ones_(fuse.project_deep.bias)
        self.ready = True

    # stages --------------------------------------------------------------

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        """uint8-range NHWC (or NCHW) images -> normalized float NCHW."""
        if images.shape[-1] == 3 and images.shape[1] != 3:
            images = images.permute(0, 3, 1, 2)
        return (images.float() - self.pixel_mean) / self.pixel_std

    def backbone_forward(self, x: torch.Tensor) -> list[FeatureMap]:
        size = self.cfg.sampler.crop_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ValueError(f"expected input of shape (N, 3, {size}, {size}), got {tuple(x.shape)}")
        return self.backbone(x)

    def second_shot_features(self, raw: list[FeatureMap]) -> list[torch.Tensor]:
        n_lfpn = self.cfg.network.lfpn_levels
        enriched: list[torch.Tensor | None] = [None] * len(raw)
        for l in range(len(raw) - 1, n_lfpn - 1, -1):
            enriched[l] = self.lateral[l](raw[l].values)
        deep = FeatureMap(n_lfpn, raw[n_lfpn].stride, enriched[n_lfpn])
        for l in range(n_lfpn - 1, -1, -1):
            deep = self.fuse[str(l)](deep, raw[l])
            enriched[l] = deep.values
        return [ctx(f) for ctx, f in zip(self.context, enriched)]

    def heads_forward(self, raw: list[FeatureMap], enriched: list[torch.Tensor]) -> HeadOutputs:
        n_branch = self.cfg.num_branches
        af_level = self.cfg.network.anchor_free_level
        cls: dict[str, list[torch.Tensor]] = {"first": [], "second": []}
        reg: dict[str, list[torch.Tensor]] = {"first": [], "second": []}
        seg, af_obj, af_dist = [], None, None
        first, second = self.heads["first"], self.heads["second"]
        for l, f in enumerate(raw):
            outs = _fused_conv(f.values, [*first["cls"][l], first["reg"][l]])
            cls["first"].append(torch.stack(outs[:n_branch], dim=1))
            reg["first"].append(outs[n_branch])
        for l, f in enumerate(enriched):
            convs = [*second["cls"][l], second["reg"][l], self.seg_head[l]]
            if l == af_level:
                convs += [self.af_obj_head, self.af_dist_head]
            outs = _fused_conv(f, convs)
            cls["second"].append(torch.stack(outs[:n_branch], dim=1))
            reg["second"].append(outs[n_branch])
            seg.append(outs[n_branch + 1])
            if l == af_level:
                af_obj = outs[n_branch + 2]
                af_dist = F.softplus(outs[n_branch + 3]) * self.cfg.network.anchor_free_scale
        return HeadOutputs(cls, reg, seg, af_obj, af_dist)

    def forward(self, x: torch.Tensor) -> HeadOutputs:
        raw = self.backbone_forward(x)
        return self.heads_forward(raw, self.second_shot_features(raw))

    def infer(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Second-shot face-branch logits ``(N, A, 2)`` and offsets ``(N, A, 4)`` only."""
        raw = self.backbone_forward(x)
        enriched = self.second_shot_features(raw)
        heads = self.heads["second"]
        logits, offsets = [], []
        for l, f in enumerate(enriched):
            logits.append(heads["cls"][l][0](f).permute(0, 2, 3, 1).flatten(1, 2))
            offsets.append(heads["reg"][l](f).permute(0, 2, 3, 1).flatten(1, 2))
        return torch.cat(logits, dim=1), torch.cat(offsets, dim=1)

    # parameters ----------------------------------------------------------

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
        self.load_state_dict(state, strict=True)
        self.ready = True


def detect(model: Detector | None, image: np.ndarray, cfg: DetectorConfig | None = None,
           anchors: np.ndarray | None = None) -> list[tuple[BBox, float]]:
    """Run the inference path on one ``H x W x 3`` image; boxes in image pixels.

    The image is resized (aspect kept, zero padded) to the crop size first.
    """
    if model is None or not getattr(model, "ready", False):
        raise RuntimeError("detector parameters are not loaded")
    cfg = cfg or model.cfg
    crop = cfg.sampler.crop_size
    h, w = image.shape[:2]
    scale = crop / max(h, w)
    if h != crop or w != crop:
        m = np.array([[scale, 0, 0], [0, scale, 0]], dtype=np.float64)
        image = cv2.warpAffine(image, m, (crop, crop), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if anchors is None:
        from facedet.anchors import build_anchor_pyramid
        anchors = build_anchor_pyramid(crop, cfg).boxes("second")
    x = model.normalize(torch.from_numpy(np.ascontiguousarray(image))[None])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits, offsets = model.infer(x)
    model.train(was_training)
    logits = logits[0].double().numpy()
    scores = 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))
    keep = np.flatnonzero(scores >= cfg.eval.score_threshold)
    if len(keep) == 0:
        return []
    keep = keep[np.argsort(-scores[keep], kind="stable")[:cfg.eval.pre_nms_top_k]]
    boxes = decode_boxes(offsets[0].double().numpy()[keep], anchors[keep], cfg.anchors.variances)
    boxes = clip_boxes(boxes / scale, (w, h))
    sel = nms_indices(boxes, scores[keep], cfg.eval.nms_iou, cfg.eval.max_detections)
    return [(BBox(*(float(v) for v in boxes[i])), float(scores[keep][i])) for i in sel]
