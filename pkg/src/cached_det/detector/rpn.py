"""Anchor-based region proposal network."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou

from ..geometry import decode_deltas, encode_deltas
from ..losses import smooth_l1
from .backbone import FPN_CHANNELS, STRIDES, FeaturePyramid
from .ops import nms_stable, stable_order

MAX_PROPOSALS = 1000


@dataclass
class ProposalSet:
    boxes: list[torch.Tensor]  # per image [n_i, 4], n_i <= max_proposals
    scores: list[torch.Tensor]

    def __len__(self):
        return len(self.boxes)


def level_anchors(stride: int, ratios: Sequence[float], scale: float, h: int, w: int,
                  dtype=torch.float32) -> torch.Tensor:
    """Anchors of one level, ordered by (row, column, ratio).  Ratio is height/width."""
    base = stride * scale
    shapes = torch.tensor([[base / math.sqrt(r), base * math.sqrt(r)] for r in ratios], dtype=dtype)
    ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2)
    half = shapes.reshape(1, -1, 2) / 2
    return torch.cat([centers - half, centers + half], dim=-1).reshape(-1, 4)


class RPNHead(nn.Module):
    def __init__(self, num_anchors: int, channels: int = FPN_CHANNELS, hidden: int = 128):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.pw = nn.Conv2d(channels, hidden, 1)
        self.cls = nn.Conv2d(hidden, num_anchors, 1)
        self.reg = nn.Conv2d(hidden, 4 * num_anchors, 1)
        for m in (self.pw, self.cls, self.reg):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, x):
        h = F.relu(self.pw(self.dw(x)))
        return self.cls(h), self.reg(h)


class RegionProposalNetwork(nn.Module):
    def __init__(self, ratios=(0.2, 1.0, 5.0), scale: float = 2.0, pre_nms_top: int = 1000,
                 nms_iou: float = 0.7, max_proposals: int = MAX_PROPOSALS, min_size: float = 1.0,
                 pos_iou: float = 0.7, neg_iou: float = 0.3, min_pos_iou: float = 0.1,
                 batch_per_image: int = 256, pos_fraction: float = 0.5):
        super().__init__()
        if max_proposals > MAX_PROPOSALS:
            raise ValueError(f"at most {MAX_PROPOSALS} proposals per image are supported")
        self.ratios = tuple(ratios)
        self.scale = scale
        self.pre_nms_top = pre_nms_top
        self.nms_iou = nms_iou
        self.max_proposals = max_proposals
        self.min_size = min_size
        self.pos_iou, self.neg_iou, self.min_pos_iou = pos_iou, neg_iou, min_pos_iou
        self.batch_per_image = batch_per_image
        self.pos_fraction = pos_fraction
        self.head = RPNHead(len(self.ratios))

    def anchors(self, pyramid: FeaturePyramid) -> list[torch.Tensor]:
        return [level_anchors(s, self.ratios, self.scale, *lvl.shape[-2:], dtype=lvl.dtype)
                for s, lvl in zip(STRIDES, pyramid.levels)]

    def raw_outputs(self, pyramid: FeaturePyramid):
        """Per level ``(objectness [B, HWA], deltas [B, HWA, 4])`` in anchor order."""
        outs = []
        for lvl in pyramid.levels:
            cls, reg = self.head(lvl)
            B, A, H, W = cls.shape
            cls = cls.permute(0, 2, 3, 1).reshape(B, -1)
            reg = reg.view(B, A, 4, H, W).permute(0, 3, 4, 1, 2).reshape(B, -1, 4)
            outs.append((cls, reg))
        return outs

    def proposals_from_outputs(self, outputs, anchors, image_sizes) -> ProposalSet:
        boxes_out, scores_out = [], []
        for b, size in enumerate(image_sizes):
            lvl_boxes, lvl_scores = [], []
            for k, ((cls, reg), anc) in enumerate(zip(outputs, anchors)):
                scores = cls[b].detach().sigmoid()
                top = stable_order(scores)[:self.pre_nms_top]
                boxes = decode_deltas(anc[top], reg[b, top].detach(), max_shape=size)
                s = scores[top]
                wh = boxes[:, 2:] - boxes[:, :2]
                ok = (wh >= self.min_size).all(dim=1)
                boxes, s = boxes[ok], s[ok]
                keep = nms_stable(boxes, s, self.nms_iou)
                lvl_boxes.append(boxes[keep])
                lvl_scores.append(s[keep])
            boxes = torch.cat(lvl_boxes)
            scores = torch.cat(lvl_scores)
            order = stable_order(scores)[:self.max_proposals]
            boxes_out.append(boxes[order])
            scores_out.append(scores[order])
        return ProposalSet(boxes_out, scores_out)

    def propose(self, pyramid: FeaturePyramid) -> ProposalSet:
        return self.proposals_from_outputs(self.raw_outputs(pyramid), self.anchors(pyramid),
                                           pyramid.image_sizes)

    def anchor_targets(self, anchors: torch.Tensor, gt_boxes: torch.Tensor,
                       generator: torch.Generator | None):
        """Sampled anchor indices, their 0/1 labels, and deltas of the positives."""
        n = anchors.shape[0]
        labels = torch.full((n,), -1, dtype=torch.long)
        if gt_boxes.shape[0] == 0:
            labels[:] = 0
            pos = torch.zeros(0, dtype=torch.long)
            matched = anchors.new_zeros((0, 4))
        else:
            ious = box_iou(anchors, gt_boxes)
            max_iou, arg = ious.max(dim=1)
            labels[max_iou < self.neg_iou] = 0
            labels[max_iou >= self.pos_iou] = 1
            # every ground truth keeps its best anchor(s)
            gt_best = ious.max(dim=0).values
            best = (ious == gt_best[None, :]) & (gt_best[None, :] >= self.min_pos_iou)
            hit = best.any(dim=1)
            labels[hit] = 1
            arg = torch.where(hit, torch.argmax(best.to(torch.int8), dim=1), arg)
            matched = gt_boxes[arg]
        pos = torch.nonzero(labels == 1).squeeze(1)
        neg = torch.nonzero(labels == 0).squeeze(1)
        n_pos = min(pos.numel(), int(self.batch_per_image * self.pos_fraction))
        n_neg = min(neg.numel(), self.batch_per_image - n_pos)
        pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
        neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
        idx = torch.cat([pos, neg])
        target_labels = (labels[idx] == 1).to(anchors.dtype)
        deltas = encode_deltas(anchors[pos], matched[pos]) if pos.numel() else anchors.new_zeros((0, 4))
        return idx, target_labels, pos, deltas

    def forward_train(self, pyramid: FeaturePyramid, gt_boxes: Sequence[torch.Tensor],
                      generator: torch.Generator | None = None):
        outputs = self.raw_outputs(pyramid)
        anchors = self.anchors(pyramid)
        all_anchors = torch.cat(anchors)
        all_cls = torch.cat([c for c, _ in outputs], dim=1)
        all_reg = torch.cat([r for _, r in outputs], dim=1)
        cls_losses, reg_losses = [], []
        for b, gts in enumerate(gt_boxes):
            idx, tl, pos, deltas = self.anchor_targets(all_anchors, gts.to(all_anchors.dtype), generator)
            cls_losses.append(F.binary_cross_entropy_with_logits(all_cls[b, idx], tl))
            reg_losses.append(smooth_l1(all_reg[b, pos], deltas, beta=1.0 / 9.0))
        losses = {"rpn_cls": torch.stack(cls_losses).mean(), "rpn_loc": torch.stack(reg_losses).mean()}
        proposals = self.proposals_from_outputs(outputs, anchors, pyramid.image_sizes)
        return losses, proposals
