"""Focal classification loss, smooth-L1 localization and their combination.

The classification term is the canonical focal form on the true class,
``-(1 - p_t)**gamma * log_b(p_t)``, averaged over RoIs.  With ``gamma=0`` and
``log_base=e`` it is exactly cross-entropy.  The combined per-stage loss adds
``loc_weight`` times smooth-L1 on foreground RoIs only (label >= 1), using the
regression output of the target class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    log_base: float = math.e
    loc_weight: float = 1.0
    beta: float = 1.0
    class_weights: tuple[float, ...] | None = None  # one per foreground class (18)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.loc_weight <= 0:
            raise ValueError(f"loc_weight must be > 0, got {self.loc_weight}")
        if self.log_base <= 1:
            raise ValueError(f"log_base must be > 1, got {self.log_base}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


def _class_weight(labels: torch.Tensor, weights: Sequence[float] | None, like: torch.Tensor):
    if weights is None:
        return None
    # background keeps weight 1
    table = like.new_tensor([1.0, *weights])
    return table[labels]


def _focal_from_log_pt(log_pt: torch.Tensor, labels: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    if log_pt.numel() == 0:
        return log_pt.new_zeros(())
    log_pt = log_pt.clamp(min=math.log(PROB_FLOOR))
    pt = log_pt.exp()
    loss = -(1.0 - pt).pow(cfg.gamma) * log_pt / math.log(cfg.log_base)
    w = _class_weight(labels, cfg.class_weights, loss)
    if w is not None:
        loss = loss * w
    return loss.mean()


def focal_loss(probs: torch.Tensor, labels: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Focal loss on a ``[N, C]`` batch of class probabilities.

    A true-class probability of zero is clamped to ``1e-12`` so the loss stays
    finite (its value is then ``(1 - 1e-12)**gamma * log_b(1e12)``).
    """
    pt = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return _focal_from_log_pt(torch.log(pt.clamp(min=PROB_FLOOR)), labels, cfg)


def focal_loss_with_logits(logits: torch.Tensor, labels: torch.Tensor,
                           cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Same as :func:`focal_loss` on ``softmax(logits)``, computed in log space."""
    log_pt = F.log_softmax(logits, dim=1).gather(1, labels.long().view(-1, 1)).squeeze(1)
    return _focal_from_log_pt(log_pt, labels, cfg)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Smooth-L1 summed over the 4 coordinates and averaged over rows; 0 for no rows."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if pred.shape[0] == 0:
        return pred.new_zeros(()) + 0.0 * pred.sum()
    diff = (pred - target).abs()
    loss = torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)
    return loss.sum(dim=1).mean()


def combined_loss(cls_logits: torch.Tensor, reg_out: torch.Tensor, labels: torch.Tensor,
                  reg_targets: torch.Tensor, cfg: LossConfig = LossConfig()
                  ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Per-stage detection loss.

    Args:
        cls_logits: ``[N, C+1]`` logits, column 0 is background.
        reg_out: ``[N, 4*C]`` class-specific deltas (class ``c`` at columns
            ``4*(c-1):4*c``) or ``[N, 4]`` class-agnostic deltas.
        labels: ``[N]`` targets in ``0..C``.
        reg_targets: ``[N, 4]`` encoded deltas; rows of background RoIs are ignored.

    Returns:
        ``(total, {"cls": ..., "loc": ...})``.
    """
    l_cls = focal_loss_with_logits(cls_logits, labels, cfg)
    fg = labels >= 1
    if reg_out.shape[1] == 4:
        pred = reg_out[fg]
    else:
        idx = torch.nonzero(fg).squeeze(1)
        cols = (labels[idx] - 1).long().view(-1, 1) * 4 + torch.arange(4, device=labels.device)
        pred = reg_out[idx.view(-1, 1), cols]
    l_loc = smooth_l1(pred, reg_targets[fg], cfg.beta)
    total = l_cls + cfg.loc_weight * l_loc
    return total, {"cls": l_cls, "loc": l_loc}
