"""Local-global context fusion placed in front of every cascade RoI head.

Two parts feed each RoI representation:

* Visual context enhancement pools every pyramid level of an image to 7x7,
  stacks them (5 x 256 = 1280 channels), abstracts the stack back to 256
  channels, and concatenates that global map behind each RoI-aligned local
  map of the same image.  A squeeze-excitation gate and a 1x1 convolution
  fuse the 512 channels back down to 256.
* Positional context encoding embeds each proposal's normalized
  ``(x1, y1, x2, y2)`` into 512 dims and runs masked self-attention over the
  proposals of one image, padded to a fixed block of 1024 slots.

:class:`ContextFusion` flattens the enhanced map through two fully
connected layers (1024) and appends the 512-dim positional encoding, giving
the 1536-dim vector consumed by the stage head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_LEVELS = 5
CHANNELS = 256
ROI_SIZE = 7
PCE_DIM = 512
BLOCK_SIZE = 1024
VISUAL_DIM = 1024


class ContractError(ValueError):
    """Input shapes or counts do not satisfy a module contract."""


class CapacityError(ValueError):
    """More boxes in one image than the positional encoder's block holds."""


@dataclass(frozen=True)
class ContextConfig:
    use_vce: bool = True
    use_pce: bool = True
    se_reduction: int = 16
    pce_layers: int = 2
    pce_heads: int = 8
    pce_ff_dim: int = 1024
    block_size: int = BLOCK_SIZE
    # Masked slots never influence real ones, so skipping the physical
    # padding gives identical outputs at a fraction of the cost.
    pad_to_block: bool = True


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gating."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        mid = max(channels // reduction, 1)
        self.reduce = nn.Conv2d(channels, mid, kernel_size=1)
        self.expand = nn.Conv2d(mid, channels, kernel_size=1)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.expand(F.relu(self.reduce(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)


class VisualContextEnhancement(nn.Module):
    def __init__(self, channels: int = CHANNELS, num_levels: int = NUM_LEVELS,
                 se_reduction: int = 16):
        super().__init__()
        self.num_levels = num_levels
        stacked = channels * num_levels
        self.abstract = nn.Sequential(
            nn.Conv2d(stacked, 2 * channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * channels, channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.se = SEBlock(2 * channels, se_reduction)
        self.reduce = nn.Conv2d(2 * channels, channels, kernel_size=1)

    def stack_levels(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        """Average-pool each level to 7x7 and concatenate: ``[B, 1280, 7, 7]``."""
        if len(levels) != self.num_levels:
            raise ContractError(f"expected {self.num_levels} pyramid levels, got {len(levels)}")
        return torch.cat([F.adaptive_avg_pool2d(x, ROI_SIZE) for x in levels], dim=1)

    def pool_global(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        """Global visual feature per image, ``[B, 256, 7, 7]``."""
        return self.abstract(self.stack_levels(levels))

    def fuse(self, local: torch.Tensor, global_feats: torch.Tensor,
             image_index: torch.Tensor) -> torch.Tensor:
        """``[N, 256, 7, 7]`` local maps + per-image globals -> ``[N, 256, 7, 7]``."""
        if local.shape[0] != image_index.shape[0]:
            raise ContractError(f"{local.shape[0]} RoI maps but {image_index.shape[0]} image indices")
        if image_index.numel() and int(image_index.max()) >= global_feats.shape[0]:
            raise ContractError(f"RoI refers to image {int(image_index.max())} but only "
                                f"{global_feats.shape[0]} global features were given")
        if local.shape[0] == 0:
            return local.new_zeros((0, local.shape[1], ROI_SIZE, ROI_SIZE))
        x = torch.cat([local, global_feats[image_index]], dim=1)
        return self.reduce(self.se(x))


class _EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer with an explicit key padding mask."""

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(inplace=True), nn.Linear(ff_dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, L, D)
        x = self.norm1(x + self.out(ctx))
        return self.norm2(x + self.ff(x))


class PositionalContextEncoder(nn.Module):
    def __init__(self, dim: int = PCE_DIM, layers: int = 2, heads: int = 8,
                 ff_dim: int = 1024, block_size: int = BLOCK_SIZE, pad_to_block: bool = True):
        super().__init__()
        self.block_size = block_size
        self.pad_to_block = pad_to_block
        self.embed = nn.Linear(4, dim)
        self.layers = nn.ModuleList(_EncoderLayer(dim, heads, ff_dim) for _ in range(layers))

    def forward(self, boxes_per_image: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Encode normalized boxes, one ``[N_i, 4]`` tensor per image -> ``[N_i, 512]`` each.

        Attention never crosses images; padded slots are zero and masked out.
        """
        counts = [int(b.shape[0]) for b in boxes_per_image]
        for i, n in enumerate(counts):
            if n > self.block_size:
                raise CapacityError(f"image {i} has {n} boxes; the block holds {self.block_size}")
        if not counts:
            return []
        length = self.block_size if self.pad_to_block else max(max(counts), 1)
        ref = boxes_per_image[0]
        seq = ref.new_zeros((len(counts), length, self.embed.out_features))
        mask = torch.ones((len(counts), length), dtype=torch.bool, device=ref.device)
        for i, b in enumerate(boxes_per_image):
            if counts[i]:
                seq[i, :counts[i]] = self.embed(b)
                mask[i, :counts[i]] = False
        # an all-masked row would give NaN attention; it is discarded anyway
        mask[:, 0] &= torch.tensor([n > 0 for n in counts], device=ref.device)
        x = seq
        for layer in self.layers:
            x = layer(x, mask)
        return [x[i, :n] for i, n in enumerate(counts)]


class ContextFusion(nn.Module):
    """One stage's local-global context fusion, producing the head input vector."""

    def __init__(self, cfg: ContextConfig = ContextConfig()):
        super().__init__()
        self.cfg = cfg
        self.vce = VisualContextEnhancement(se_reduction=cfg.se_reduction) if cfg.use_vce else None
        self.pce = PositionalContextEncoder(
            layers=cfg.pce_layers, heads=cfg.pce_heads, ff_dim=cfg.pce_ff_dim,
            block_size=cfg.block_size, pad_to_block=cfg.pad_to_block) if cfg.use_pce else None
        self.fc1 = nn.Linear(CHANNELS * ROI_SIZE * ROI_SIZE, VISUAL_DIM)
        self.fc2 = nn.Linear(VISUAL_DIM, VISUAL_DIM)

    @property
    def out_dim(self) -> int:
        return VISUAL_DIM + (PCE_DIM if self.pce is not None else 0)

    def global_features(self, levels: Sequence[torch.Tensor]) -> torch.Tensor | None:
        return self.vce.pool_global(levels) if self.vce is not None else None

    def visual_vector(self, roi_feats: torch.Tensor, global_feats: torch.Tensor | None,
                      image_index: torch.Tensor) -> torch.Tensor:
        x = roi_feats
        if self.vce is not None:
            x = self.vce.fuse(x, global_feats, image_index)
        x = F.relu(self.fc1(x.flatten(1)))
        return F.relu(self.fc2(x))

    def encode_positions(self, norm_boxes: torch.Tensor, image_index: torch.Tensor,
                         num_images: int) -> torch.Tensor:
        """PCE over each image's boxes, scattered back to RoI order: ``[N, 512]``."""
        groups = [torch.nonzero(image_index == i).squeeze(1) for i in range(num_images)]
        encoded = self.pce([norm_boxes[g] for g in groups])
        out = norm_boxes.new_zeros((norm_boxes.shape[0], PCE_DIM))
        for g, e in zip(groups, encoded):
            out[g] = e
        return out

    def forward(self, roi_feats: torch.Tensor, image_index: torch.Tensor,
                norm_boxes: torch.Tensor, global_feats: torch.Tensor | None,
                num_images: int) -> torch.Tensor:
        n = roi_feats.shape[0]
        if norm_boxes.shape != (n, 4) or image_index.shape != (n,):
            raise ContractError(f"{n} RoI maps need [{n}, 4] boxes and [{n}] image indices, got "
                                f"{tuple(norm_boxes.shape)} and {tuple(image_index.shape)}")
        visual = self.visual_vector(roi_feats, global_feats, image_index)
        if self.pce is None:
            return visual
        return torch.cat([visual, self.encode_positions(norm_boxes, image_index, num_images)], dim=1)
