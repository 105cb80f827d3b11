"""Axis-aligned boxes, overlap, normalization and the box-delta parameterization.

Boxes are corner format ``(x1, y1, x2, y2)`` in continuous pixel coordinates;
area is ``(x2 - x1) * (y2 - y1)`` with no +1 convention.  Scalar helpers work
on :class:`Box` records, the ``*_array``/``*_tensor`` variants are vectorized
for numpy and torch respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

# dw/dh clamp used when decoding, as in standard two-stage detectors
MAX_LOG_RATIO = abs(math.log(16.0 / 1000.0))


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = tuple(float(c) for c in (self.x1, self.y1, self.x2, self.y2))
        for name, c in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, c)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box must satisfy x2 >= x1 and y2 >= y1, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    @classmethod
    def from_xywh(cls, xywh: Sequence[float]) -> "Box":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    def clip(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class NormalizedBox:
    """Box coordinates as fractions of image width/height, each in [0, 1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for c in (self.x1, self.y1, self.x2, self.y2):
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"normalized coordinate out of [0, 1]: {c}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


def union_box(boxes: Sequence[Box]) -> Box:
    """Tight bounding box of a non-empty collection of boxes."""
    if not boxes:
        raise ValueError("union of an empty box collection is undefined")
    return Box(min(b.x1 for b in boxes), min(b.y1 for b in boxes),
               max(b.x2 for b in boxes), max(b.y2 for b in boxes))


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def normalize_box(b: Box, width: float, height: float) -> NormalizedBox:
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    c = b.clip(width, height)
    return NormalizedBox(c.x1 / width, c.y1 / height, c.x2 / width, c.y2 / height)


def normalize_boxes_tensor(boxes: torch.Tensor, width: float, height: float) -> torch.Tensor:
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    scale = boxes.new_tensor([width, height, width, height])
    return (boxes / scale).clamp(0.0, 1.0)


def encode_delta(proposal: Box, target: Box) -> BoxDelta:
    pw, ph = proposal.width, proposal.height
    if pw <= 0 or ph <= 0:
        raise ValueError(f"proposal must have positive width and height, got {proposal}")
    pcx, pcy = proposal.center
    tcx, tcy = target.center
    return BoxDelta((tcx - pcx) / pw, (tcy - pcy) / ph,
                    math.log(target.width / pw), math.log(target.height / ph))


def decode_delta(proposal: Box, delta: BoxDelta) -> Box:
    pw, ph = proposal.width, proposal.height
    if pw <= 0 or ph <= 0:
        raise ValueError(f"proposal must have positive width and height, got {proposal}")
    pcx, pcy = proposal.center
    cx = pcx + delta.tx * pw
    cy = pcy + delta.ty * ph
    w = pw * math.exp(delta.tw)
    h = ph * math.exp(delta.th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def encode_deltas(proposals: torch.Tensor, targets: torch.Tensor,
                  stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Vectorized :func:`encode_delta`, divided by per-coordinate ``stds``."""
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    pcx = proposals[:, 0] + 0.5 * pw
    pcy = proposals[:, 1] + 0.5 * ph
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    deltas = torch.stack([(tcx - pcx) / pw, (tcy - pcy) / ph,
                          torch.log(tw / pw), torch.log(th / ph)], dim=1)
    return deltas / deltas.new_tensor(stds)


def decode_deltas(proposals: torch.Tensor, deltas: torch.Tensor,
                  stds: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
                  max_shape: tuple[int, int] | None = None) -> torch.Tensor:
    """Inverse of :func:`encode_deltas`; ``max_shape=(h, w)`` clips the result."""
    deltas = deltas * deltas.new_tensor(stds)
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    pcx = proposals[:, 0] + 0.5 * pw
    pcy = proposals[:, 1] + 0.5 * ph
    dw = deltas[:, 2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO)
    dh = deltas[:, 3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO)
    cx = pcx + deltas[:, 0] * pw
    cy = pcy + deltas[:, 1] * ph
    w = pw * torch.exp(dw)
    h = ph * torch.exp(dh)
    out = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)
    if max_shape is not None:
        out = clip_boxes(out, max_shape)
    return out


def clip_boxes(boxes: torch.Tensor, shape: tuple[int, int]) -> torch.Tensor:
    h, w = shape
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)
