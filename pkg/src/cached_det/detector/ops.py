"""Stable-order NMS, RoI alignment over the pyramid, and per-stage target assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torchvision.ops import box_iou, nms

from ..geometry import encode_deltas
from .backbone import FPN_CHANNELS, STRIDES, FeaturePyramid

ROI_SIZE = 7
ROI_LEVELS = 4  # RoIs are pooled from strides 4..32
FINEST_SCALE = 56


def stable_order(scores: torch.Tensor) -> torch.Tensor:
    """Indices sorting ``scores`` descending; equal scores keep index order."""
    return torch.sort(scores, descending=True, stable=True).indices


def nms_stable(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """NMS whose output order (and tie-breaking) follows :func:`stable_order`."""
    if boxes.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long, device=boxes.device)
    order = stable_order(scores)
    rank = -torch.arange(order.numel(), dtype=torch.float32, device=boxes.device)
    keep = nms(boxes[order].float(), rank, iou_threshold)
    return order[keep]


def batched_nms_stable(boxes: torch.Tensor, scores: torch.Tensor, groups: torch.Tensor,
                       iou_threshold: float) -> torch.Tensor:
    """Per-group NMS (boxes of different groups never suppress each other)."""
    if boxes.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long, device=boxes.device)
    offset = groups.to(boxes.dtype) * (boxes.max() + 1)
    return nms_stable(boxes + offset[:, None], scores, iou_threshold)


@dataclass
class RoIBatch:
    boxes: torch.Tensor  # [N, 4] image coordinates
    features: torch.Tensor  # [N, 256, 7, 7]
    image_index: torch.Tensor  # [N]

    def __len__(self):
        return self.boxes.shape[0]


def _bilinear_axis(coord: torch.Tensor, size: int):
    """Low/high indices and weights for bilinear sampling along one axis.

    Matches the aligned RoI-align convention: samples more than one pixel
    outside the map contribute zero, others are clamped to the border.
    """
    valid = (coord >= -1.0) & (coord <= size)
    c = coord.clamp(min=0.0)
    low = c.floor().long().clamp(max=size - 1)
    at_edge = low >= size - 1
    high = torch.where(at_edge, low, low + 1)
    c = torch.where(at_edge, low.to(c.dtype), c)
    frac = c - low.to(c.dtype)
    return low, high, 1.0 - frac, frac, valid


def roi_align_level(feature: torch.Tensor, rois: torch.Tensor, spatial_scale: float,
                    output_size: int = ROI_SIZE, sampling_ratio: int = 2) -> torch.Tensor:
    """Aligned RoI-align on one level, written as ``weights @ features``.

    ``rois`` is ``[K, 5]`` with the batch index first.  The bilinear weights
    form a sparse ``[K*49, B*H*W]`` matrix applied to a channel-last view of
    the map; the backward pass is the transposed sparse product, which is far
    cheaper on CPU than a per-channel scatter.
    """
    B, C, H, W = feature.shape
    K = rois.shape[0]
    if K == 0:
        return feature.new_zeros((0, C, output_size, output_size))
    flat = feature.permute(0, 2, 3, 1).reshape(B * H * W, C)
    rois = rois.detach()
    b = rois[:, 0].long()
    x1 = rois[:, 1] * spatial_scale - 0.5
    y1 = rois[:, 2] * spatial_scale - 0.5
    bin_w = (rois[:, 3] * spatial_scale - 0.5 - x1) / output_size
    bin_h = (rois[:, 4] * spatial_scale - 0.5 - y1) / output_size
    S = output_size * sampling_ratio
    steps = (torch.arange(S, dtype=rois.dtype, device=rois.device) + 0.5) / sampling_ratio
    xs = x1[:, None] + steps[None, :] * bin_w[:, None]
    ys = y1[:, None] + steps[None, :] * bin_h[:, None]
    xl, xh, wxl, wxh, vx = _bilinear_axis(xs, W)
    yl, yh, wyl, wyh, vy = _bilinear_axis(ys, H)
    valid = (vy[:, :, None] & vx[:, None, :]).to(feature.dtype) / sampling_ratio ** 2
    base = (b * H * W)[:, None, None]
    cell = torch.arange(S, device=rois.device) // sampling_ratio
    out_row = (torch.arange(K, device=rois.device)[:, None, None] * output_size ** 2
               + cell[None, :, None] * output_size + cell[None, None, :]).reshape(-1)
    rows, cols, vals = [], [], []
    for yi, wy in ((yl, wyl), (yh, wyh)):
        for xi, wx in ((xl, wxl), (xh, wxh)):
            rows.append(out_row)
            cols.append((base + yi[:, :, None] * W + xi[:, None, :]).reshape(-1))
            vals.append((wy[:, :, None] * wx[:, None, :] * valid).reshape(-1).to(feature.dtype))
    weights = torch.sparse_coo_tensor(torch.stack([torch.cat(rows), torch.cat(cols)]),
                                      torch.cat(vals), (K * output_size ** 2, B * H * W),
                                      check_invariants=False).coalesce()
    out = torch.sparse.mm(weights, flat)
    return out.view(K, output_size, output_size, C).permute(0, 3, 1, 2).contiguous()


def roi_levels(boxes: torch.Tensor) -> torch.Tensor:
    """Pyramid level (0 = stride 4) for each box from its size."""
    scale = torch.sqrt((boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0))
    lvl = torch.floor(torch.log2(scale / FINEST_SCALE + 1e-6))
    return lvl.clamp(0, ROI_LEVELS - 1).long()


def roi_align(pyramid: FeaturePyramid, boxes: Sequence[torch.Tensor] | torch.Tensor,
              image_index: torch.Tensor | None = None) -> RoIBatch:
    """Bilinear 7x7 sampling of each box from its size-selected level.

    ``boxes`` is either a list of per-image ``[N_i, 4]`` tensors, or one
    ``[N, 4]`` tensor together with ``image_index``.
    """
    ref = pyramid.levels[0]
    if image_index is None:
        boxes = list(boxes)
        image_index = torch.cat([torch.full((b.shape[0],), i, dtype=torch.long)
                                 for i, b in enumerate(boxes)]) if boxes else \
            torch.zeros(0, dtype=torch.long)
        boxes = torch.cat(boxes) if boxes else ref.new_zeros((0, 4))
    n = boxes.shape[0]
    out = ref.new_zeros((n, FPN_CHANNELS, ROI_SIZE, ROI_SIZE))
    if n == 0:
        return RoIBatch(boxes.to(ref.dtype), out, image_index)
    boxes = boxes.to(ref.dtype)
    lvl = roi_levels(boxes)
    rois = torch.cat([image_index.to(ref.dtype)[:, None], boxes], dim=1)
    for k in range(ROI_LEVELS):
        sel = torch.nonzero(lvl == k).squeeze(1)
        if sel.numel() == 0:
            continue
        feats = roi_align_level(pyramid.levels[k], rois[sel], 1.0 / STRIDES[k])
        out = out.index_copy(0, sel, feats)
    return RoIBatch(boxes, out, image_index)


@dataclass
class StageConfig:
    index: int
    iou_threshold: float
    target_stds: tuple[float, float, float, float]

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"stage IoU threshold must be in (0, 1), got {self.iou_threshold}")


def assign_targets(proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                   stage: StageConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Label each proposal with its best-overlapping ground truth.

    A proposal is foreground iff its highest IoU with any ground truth is at
    least the stage threshold; it then takes that ground truth's class
    (``1..18``) and encoded delta.  Background rows get label 0 and a zero
    delta that the loss ignores.

    Returns ``(labels, deltas, max_iou)``.
    """
    n = proposals.shape[0]
    labels = torch.zeros(n, dtype=torch.long, device=proposals.device)
    deltas = proposals.new_zeros((n, 4))
    if n == 0 or gt_boxes.shape[0] == 0:
        return labels, deltas, proposals.new_zeros(n)
    ious = box_iou(proposals, gt_boxes.to(proposals.dtype))
    max_iou, arg = ious.max(dim=1)
    fg = max_iou >= stage.iou_threshold
    labels[fg] = gt_labels[arg[fg]].long()
    if fg.any():
        deltas[fg] = encode_deltas(proposals[fg], gt_boxes[arg[fg]].to(proposals.dtype),
                                   stage.target_stds)
    return labels, deltas, max_iou


def sample_rois(labels: torch.Tensor, num: int, pos_fraction: float,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Random subset of at most ``num`` indices with at most ``pos_fraction`` foreground."""
    pos = torch.nonzero(labels > 0).squeeze(1)
    neg = torch.nonzero(labels == 0).squeeze(1)
    n_pos = min(pos.numel(), int(num * pos_fraction))
    n_neg = min(neg.numel(), num - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return torch.cat([pos, neg])
