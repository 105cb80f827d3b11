"""
Focal classification loss and gated box regression
==================================================

Each cascade stage is trained with a focal loss over the 19 logits (18 classes
plus background) and a smooth-L1 box loss that only counts foreground RoIs.
"""

import math

import torch
import torch.nn.functional as F

from cached_det.losses import LossConfig, combined_loss, focal_loss, focal_loss_with_logits

# With gamma = 0 and natural logs the focal loss is plain cross-entropy.
logits = torch.randn(6, 19, dtype=torch.float64)
labels = torch.tensor([0, 1, 5, 5, 18, 0])
print("CE:", F.cross_entropy(logits, labels).item())
print("focal, gamma=0:", focal_loss_with_logits(logits, labels, LossConfig(gamma=0.0)).item())

# Larger gamma shrinks the loss of confident predictions much more than that
# of hard ones.
for pt in (0.9, 0.5, 0.1):
    probs = torch.full((1, 19), (1 - pt) / 18, dtype=torch.float64)
    probs[0, 3] = pt
    row = [focal_loss(probs, torch.tensor([3]), LossConfig(gamma=g)).item() for g in (0, 1, 2, 5)]
    print(f"p_t={pt}: " + "  ".join(f"{v:.4f}" for v in row))
print("log base 2 of p_t=0.25:", focal_loss(
    torch.tensor([[0.25, 0.75]], dtype=torch.float64), torch.tensor([0]),
    LossConfig(gamma=0.0, log_base=2.0)).item(), "(= -log2 0.25 =", -math.log2(0.25), ")")

# %%
# Box regression is per class (18 x 4 outputs); only the ground-truth class's
# deltas enter the loss, and only for foreground rows.
reg = torch.randn(6, 72, dtype=torch.float64, requires_grad=True)
targets = torch.randn(6, 4, dtype=torch.float64)
total, parts = combined_loss(logits, reg, labels, targets, LossConfig(loc_weight=1.0))
total.backward()
print({k: round(v.item(), 4) for k, v in parts.items()})
print("rows with regression gradient:", reg.grad.abs().sum(1).nonzero().flatten().tolist())

_, parts = combined_loss(logits, reg, torch.zeros(6, dtype=torch.long), targets)
print("all-background localization loss:", parts["loc"].item())
