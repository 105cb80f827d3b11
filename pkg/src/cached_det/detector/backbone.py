"""Compact residual backbone and feature pyramid (strides 4..64, 256 channels)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

STRIDES = (4, 8, 16, 32, 64)
FPN_CHANNELS = 256
MIN_SIDE = 64


@dataclass
class FeaturePyramid:
    levels: tuple[torch.Tensor, ...]  # each [B, 256, H/s, W/s]
    image_sizes: list[tuple[int, int]]  # unpadded (h, w) per image

    @property
    def num_images(self) -> int:
        return self.levels[0].shape[0]


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _gn(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _gn(cout))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + s)


class CompactResNet(nn.Module):
    """Four residual stages at strides 4, 8, 16, 32."""

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 256), blocks: Sequence[int] = (1, 1, 2, 1)):
        super().__init__()
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0] // 2, 3, 2, 1, bias=False), _gn(widths[0] // 2), nn.ReLU(inplace=True),
            nn.Conv2d(widths[0] // 2, widths[0], 3, 2, 1, bias=False), _gn(widths[0]), nn.ReLU(inplace=True),
        )
        stages = []
        cin = widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            layers = [ResidualBlock(cin, w, stride=1 if i == 0 else 2)]
            layers += [ResidualBlock(w, w) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FPN(nn.Module):
    """Top-down pyramid; P6 is a stride-2 subsample of P5."""

    def __init__(self, in_channels: Sequence[int], out_channels: int = FPN_CHANNELS):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        # depthwise 3x3 then pointwise projection: the "final projection" per level
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1, groups=out_channels)
            for _ in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 1) for _ in in_channels)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 1, 0, -1):
            lat[i - 1] = lat[i - 1] + F.interpolate(lat[i], size=lat[i - 1].shape[-2:], mode="nearest")
        outs = [proj(smooth(x)) for x, smooth, proj in zip(lat, self.smooth, self.output)]
        outs.append(F.max_pool2d(outs[-1], kernel_size=1, stride=2))
        return outs

    def zero_output_projections(self):
        for proj in self.output:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)


class BackboneFPN(nn.Module):
    """Default pluggable backbone: any module mapping ``[B,3,H,W]`` (H, W multiples
    of 64) to five ``[B,256,H/s,W/s]`` maps can replace it."""

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        self.body = CompactResNet(widths)
        self.fpn = FPN(widths)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.fpn(self.body(images))


def check_image_batch(images: torch.Tensor):
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected an RGB batch [B, 3, H, W], got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if min(h, w) < MIN_SIDE:
        raise ValueError(f"image side {min(h, w)} is below the {MIN_SIDE}px minimum")
    if h % STRIDES[-1] or w % STRIDES[-1]:
        raise ValueError(f"padded size {h}x{w} must be a multiple of {STRIDES[-1]}")


def extract_pyramid(backbone: nn.Module, images: torch.Tensor,
                    image_sizes: list[tuple[int, int]] | None = None) -> FeaturePyramid:
    check_image_batch(images)
    levels = tuple(backbone(images))
    if len(levels) != len(STRIDES):
        raise ValueError(f"backbone produced {len(levels)} levels, expected {len(STRIDES)}")
    h, w = images.shape[-2:]
    for lvl, s in zip(levels, STRIDES):
        if lvl.shape[1] != FPN_CHANNELS or tuple(lvl.shape[-2:]) != (h // s, w // s):
            raise ValueError(f"level at stride {s} has shape {tuple(lvl.shape)}; expected "
                             f"[B, {FPN_CHANNELS}, {h // s}, {w // s}]")
    if image_sizes is None:
        image_sizes = [(h, w)] * images.shape[0]
    return FeaturePyramid(levels, list(image_sizes))
