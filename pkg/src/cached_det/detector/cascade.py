"""Three-stage cascade detector with a context-fusion module before each head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from ..context import ContextConfig, ContextFusion
from ..geometry import Box, clip_boxes, decode_deltas
from ..losses import LossConfig, combined_loss
from ..taxonomy import CATEGORY_NAME, NUM_CLASSES, LabeledBox
from .backbone import STRIDES, BackboneFPN, FeaturePyramid, extract_pyramid
from .ops import RoIBatch, StageConfig, assign_targets, batched_nms_stable, roi_align, sample_rois
from .rpn import ProposalSet, RegionProposalNetwork

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class ModelStateError(RuntimeError):
    """The model has neither been trained nor loaded from a checkpoint."""


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = NUM_CLASSES
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256)
    anchor_ratios: tuple[float, ...] = (0.2, 1.0, 5.0)
    anchor_scale: float = 2.0
    rpn_pre_nms_top: int = 1000
    rpn_nms_iou: float = 0.7
    rpn_pos_iou: float = 0.7
    max_proposals: int = 1000
    rpn_batch_per_image: int = 256
    stage_ious: tuple[float, ...] = (0.5, 0.6, 0.7)
    stage_stds: tuple[tuple[float, ...], ...] = (
        (0.1, 0.1, 0.2, 0.2), (0.05, 0.05, 0.1, 0.1), (0.033, 0.033, 0.067, 0.067))
    stage_loss_weights: tuple[float, ...] = (1.0, 0.5, 0.25)
    rois_per_image: int = 512
    roi_pos_fraction: float = 0.25
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 300
    average_stage_scores: bool = False
    max_side: int = 512
    context: ContextConfig = field(default_factory=ContextConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        ious = list(self.stage_ious)
        if len(ious) != 3 or any(b <= a for a, b in zip(ious, ious[1:])):
            raise ValueError(f"three strictly increasing stage IoU thresholds required, got {ious}")
        if len(self.stage_stds) != 3 or len(self.stage_loss_weights) != 3:
            raise ValueError("stage_stds and stage_loss_weights need one entry per stage")

    def stages(self) -> list[StageConfig]:
        return [StageConfig(i + 1, t, tuple(s)) for i, (t, s) in
                enumerate(zip(self.stage_ious, self.stage_stds))]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        if "context" in d:
            d["context"] = ContextConfig(**d["context"])
        if "loss" in d:
            loss = dict(d["loss"])
            if loss.get("class_weights") is not None:
                loss["class_weights"] = tuple(loss["class_weights"])
            d["loss"] = LossConfig(**loss)
        for k in ("backbone_widths", "anchor_ratios", "stage_ious", "stage_loss_weights"):
            if k in d:
                d[k] = tuple(d[k])
        if "stage_stds" in d:
            d["stage_stds"] = tuple(tuple(s) for s in d["stage_stds"])
        return cls(**d)


class StageHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.cls = nn.Linear(in_dim, num_classes + 1)
        self.reg = nn.Linear(in_dim, 4 * num_classes)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.cls.bias)
        nn.init.zeros_(self.reg.bias)

    def forward(self, x):
        return self.cls(x), self.reg(x)


def class_deltas(reg: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Pick the 4 deltas of class ``labels[i]`` (1-based) from ``[N, 4*C]``."""
    cols = (labels - 1).clamp(min=0).view(-1, 1) * 4 + torch.arange(4, device=reg.device)
    return reg.gather(1, cols)


@dataclass
class ImageBatch:
    tensor: torch.Tensor  # [B, 3, Hp, Wp], normalized, zero padded
    sizes: list[tuple[int, int]]  # resized (h, w)
    scales: list[float]  # resized / original


def prepare_images(images: Sequence[np.ndarray], max_side: int = 512,
                   dtype=torch.float32) -> ImageBatch:
    """Resize (only down) to ``max_side``, normalize, and pad to a multiple of 64."""
    arrays, sizes, scales = [], [], []
    for img in images:
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 RGB image, got shape {img.shape}")
        h, w = img.shape[:2]
        scale = min(1.0, max_side / max(h, w))
        if scale < 1.0:
            nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
            img = np.asarray(Image.fromarray(img).resize((nw, nh), Image.BILINEAR))
            h, w = nh, nw
        arrays.append(img)
        sizes.append((h, w))
        scales.append(scale)
    div = STRIDES[-1]
    ph = max(-(-h // div) * div for h, _ in sizes)
    pw = max(-(-w // div) * div for _, w in sizes)
    batch = torch.zeros((len(arrays), 3, ph, pw), dtype=dtype)
    for i, img in enumerate(arrays):
        t = torch.from_numpy(np.array(img, copy=True)).permute(2, 0, 1).to(dtype)
        batch[i, :, :t.shape[1], :t.shape[2]] = (t / 255.0 - PIXEL_MEAN) / PIXEL_STD
    return ImageBatch(batch, sizes, scales)


class CascadeDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig = DetectorConfig(), backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone if backbone is not None else BackboneFPN(cfg.backbone_widths)
        self.rpn = RegionProposalNetwork(
            ratios=cfg.anchor_ratios, scale=cfg.anchor_scale, pre_nms_top=cfg.rpn_pre_nms_top,
            nms_iou=cfg.rpn_nms_iou, max_proposals=cfg.max_proposals,
            batch_per_image=cfg.rpn_batch_per_image, pos_iou=cfg.rpn_pos_iou)
        # same architecture per stage, separate parameters
        self.fusions = nn.ModuleList(ContextFusion(cfg.context) for _ in range(3))
        self.heads = nn.ModuleList(StageHead(f.out_dim, cfg.num_classes) for f in self.fusions)
        self.stage_cfgs = cfg.stages()
        self.ready = False

    def mark_ready(self):
        self.ready = True

    def pyramid(self, batch: ImageBatch) -> FeaturePyramid:
        return extract_pyramid(self.backbone, batch.tensor, batch.sizes)

    def _normalized(self, boxes: torch.Tensor, image_index: torch.Tensor,
                    sizes: list[tuple[int, int]]) -> torch.Tensor:
        hw = boxes.new_tensor(sizes)
        scale = hw[image_index][:, [1, 0, 1, 0]]
        return (boxes / scale).clamp(0.0, 1.0)

    def run_stage(self, t: int, pyramid: FeaturePyramid, rois: RoIBatch,
                  global_feats: torch.Tensor | None):
        norm = self._normalized(rois.boxes, rois.image_index, pyramid.image_sizes)
        vec = self.fusions[t](rois.features, rois.image_index, norm, global_feats,
                              pyramid.num_images)
        return self.heads[t](vec)

    def refine(self, t: int, boxes: torch.Tensor, image_index: torch.Tensor,
               cls: torch.Tensor, reg: torch.Tensor, sizes, labels: torch.Tensor | None = None):
        """Decode stage ``t`` regression into the next stage's boxes (no gradient)."""
        with torch.no_grad():
            pred = cls[:, 1:].argmax(dim=1) + 1
            if labels is not None:
                pred = torch.where(labels > 0, labels, pred)
            deltas = class_deltas(reg, pred)
            out = decode_deltas(boxes, deltas, self.stage_cfgs[t].target_stds)
            hw = boxes.new_tensor(sizes)[image_index]
            out = torch.stack([out[:, 0].clamp(min=0), out[:, 1].clamp(min=0),
                               torch.minimum(out[:, 2], hw[:, 1]), torch.minimum(out[:, 3], hw[:, 0])], 1)
            # keep degenerate boxes valid for the next RoI pooling
            out[:, 2] = torch.maximum(out[:, 2], out[:, 0] + 1e-2)
            out[:, 3] = torch.maximum(out[:, 3], out[:, 1] + 1e-2)
        return out

    def forward_train(self, batch: ImageBatch, gt_boxes: Sequence[torch.Tensor],
                      gt_labels: Sequence[torch.Tensor], generator: torch.Generator | None = None
                      ) -> dict[str, torch.Tensor]:
        """Losses of one training step (RPN + three weighted cascade stages)."""
        pyramid = self.pyramid(batch)
        dtype = batch.tensor.dtype
        gt_boxes = [g.to(dtype) for g in gt_boxes]
        losses, proposals = self.rpn.forward_train(pyramid, gt_boxes, generator)
        current = [p.detach() for p in proposals.boxes]
        total = losses["rpn_cls"] + losses["rpn_loc"]
        for t, stage in enumerate(self.stage_cfgs):
            sampled, labels, targets, is_gt, index = [], [], [], [], []
            for i, (props, gts, gl) in enumerate(zip(current, gt_boxes, gt_labels)):
                cand = torch.cat([gts, props])
                gt_flag = torch.cat([torch.ones(len(gts), dtype=torch.bool),
                                     torch.zeros(len(props), dtype=torch.bool)])
                lab, dl, _ = assign_targets(cand, gts, gl, stage)
                keep = sample_rois(lab, self.cfg.rois_per_image, self.cfg.roi_pos_fraction, generator)
                sampled.append(cand[keep])
                labels.append(lab[keep])
                targets.append(dl[keep])
                is_gt.append(gt_flag[keep])
                index.append(torch.full((keep.numel(),), i, dtype=torch.long))
            boxes = torch.cat(sampled)
            image_index = torch.cat(index)
            labels_t = torch.cat(labels)
            rois = roi_align(pyramid, boxes, image_index)
            global_feats = self.fusions[t].global_features(pyramid.levels)
            cls, reg = self.run_stage(t, pyramid, rois, global_feats)
            loss, parts = combined_loss(cls, reg, labels_t, torch.cat(targets), self.cfg.loss)
            losses[f"s{t + 1}_cls"] = parts["cls"]
            losses[f"s{t + 1}_loc"] = parts["loc"]
            total = total + self.cfg.stage_loss_weights[t] * loss
            if t < 2:
                refined = self.refine(t, boxes, image_index, cls, reg, pyramid.image_sizes, labels_t)
                keep_mask = ~torch.cat(is_gt)
                current = [refined[(image_index == i) & keep_mask] for i in range(len(gt_boxes))]
        losses["total"] = total
        return losses

    @torch.no_grad()
    def detect_batch(self, batch: ImageBatch, proposals: ProposalSet | None = None):
        """Per image ``(boxes [K,4], scores [K], labels [K] in 1..18)`` in resized coordinates."""
        pyramid = self.pyramid(batch)
        if proposals is None:
            proposals = self.rpn.propose(pyramid)
        boxes = torch.cat(proposals.boxes) if len(proposals) else batch.tensor.new_zeros((0, 4))
        image_index = torch.cat([torch.full((len(b),), i, dtype=torch.long)
                                 for i, b in enumerate(proposals.boxes)])
        stage_scores = []
        for t in range(3):
            rois = roi_align(pyramid, boxes, image_index)
            global_feats = self.fusions[t].global_features(pyramid.levels)
            cls, reg = self.run_stage(t, pyramid, rois, global_feats)
            stage_scores.append(torch.softmax(cls, dim=1))
            if t < 2:
                boxes = self.refine(t, boxes, image_index, cls, reg, pyramid.image_sizes)
        scores = torch.stack(stage_scores).mean(0) if self.cfg.average_stage_scores else stage_scores[-1]
        C = self.cfg.num_classes
        n = boxes.shape[0]
        per_class = decode_deltas(boxes.repeat_interleave(C, 0), reg.reshape(n * C, 4),
                                  self.stage_cfgs[-1].target_stds).view(n, C, 4)
        results = []
        for i, (h, w) in enumerate(pyramid.image_sizes):
            sel = image_index == i
            b = clip_boxes(per_class[sel].reshape(-1, 4), (h, w)).view(-1, C, 4)
            s = scores[sel][:, 1:]
            roi_idx, cls_idx = torch.nonzero(s > self.cfg.score_threshold, as_tuple=True)
            cand_boxes = b[roi_idx, cls_idx]
            cand_scores = s[roi_idx, cls_idx]
            wh = cand_boxes[:, 2:] - cand_boxes[:, :2]
            ok = (wh > 0).all(dim=1)
            cand_boxes, cand_scores, cls_idx = cand_boxes[ok], cand_scores[ok], cls_idx[ok]
            keep = batched_nms_stable(cand_boxes, cand_scores, cls_idx, self.cfg.nms_iou)
            keep = keep[:self.cfg.max_detections]
            results.append((cand_boxes[keep], cand_scores[keep], cls_idx[keep] + 1))
        return results


def cascade_infer(image: np.ndarray, model: CascadeDetector) -> list[LabeledBox]:
    """Detect chart elements in one RGB image; boxes are in original pixel coordinates."""
    return cascade_infer_batch([image], model)[0]


def cascade_infer_batch(images: Sequence[np.ndarray], model: CascadeDetector) -> list[list[LabeledBox]]:
    if not model.ready:
        raise ModelStateError("model parameters are uninitialized; train or load a checkpoint first")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = prepare_images(images, model.cfg.max_side, dtype=dtype)
    try:
        raw = model.detect_batch(batch)
    finally:
        model.train(was_training)
    out = []
    for (boxes, scores, labels), scale, img in zip(raw, batch.scales, images):
        h, w = np.asarray(img).shape[:2]
        dets = []
        for k, (bx, s, c) in enumerate(zip((boxes / scale).tolist(), scores.tolist(), labels.tolist())):
            x1, y1, x2, y2 = (min(max(bx[0], 0.0), w), min(max(bx[1], 0.0), h),
                              min(max(bx[2], 0.0), w), min(max(bx[3], 0.0), h))
            dets.append(LabeledBox(Box(x1, y1, max(x2, x1), max(y2, y1)), CATEGORY_NAME[int(c)],
                                   id=k + 1, score=min(max(float(s), 0.0), 1.0)))
        out.append(dets)
    return out
