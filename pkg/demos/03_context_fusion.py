"""
Visual and positional context for every RoI
===========================================

Before each cascade head, the RoI feature is enriched twice.  VCE pools all
five pyramid levels into one global 7x7 map per image and mixes it into each
local feature through an SE block.  PCE embeds the normalized proposal boxes
and runs self-attention over all proposals of an image.  The fused vector is
the 1024-d visual head output concatenated with the 512-d positional code.
"""

import torch

from cached_det.context import ContextConfig, ContextFusion, PositionalContextEncoder

torch.manual_seed(0)
fusion = ContextFusion(ContextConfig(pad_to_block=False)).eval()

# Two images, pyramid levels at strides 4..64 of a 128x128 input.
levels = [torch.randn(2, 256, 128 // s, 128 // s) for s in (4, 8, 16, 32, 64)]
with torch.no_grad():
    stacked = fusion.vce.stack_levels(levels)
    global_feats = fusion.vce.pool_global(levels)
print("stacked levels:", tuple(stacked.shape), "-> global:", tuple(global_feats.shape))

# 17 RoIs spread over the two images.
n = 17
image_index = torch.arange(n) % 2
local = torch.randn(n, 256, 7, 7)
xy = torch.rand(n, 2) * 0.7
boxes = torch.cat([xy, xy + 0.05 + torch.rand(n, 2) * 0.2], dim=1)
with torch.no_grad():
    fused_local = fusion.vce.fuse(local, global_feats, image_index)
    positions = fusion.encode_positions(boxes, image_index, 2)
    vector = fusion(local, image_index, boxes, global_feats, 2)
print("VCE output:", tuple(fused_local.shape))
print("PCE output:", tuple(positions.shape))
print("fused vector:", tuple(vector.shape))

# %%
# Self-attention treats the proposals as a set: permuting the boxes permutes
# the encodings, and padding slots are masked out entirely.
pce = PositionalContextEncoder(pad_to_block=True).double().eval()
tight = PositionalContextEncoder(pad_to_block=False).double().eval()
tight.load_state_dict(pce.state_dict())
b = boxes.double()
perm = torch.randperm(n)
with torch.no_grad():
    ref = pce([b])[0]
    print("permutation error:", (ref[perm] - pce([b[perm]])[0]).abs().max().item())
    print("padding error:", (ref - tight([b])[0]).abs().max().item())

# Turning the context off leaves the plain 1024-d head vector.
plain = ContextFusion(ContextConfig(use_vce=False, use_pce=False))
print("no-context width:", plain.out_dim)
