"""
Boxes, deltas and the 18-class chart taxonomy
=============================================

Every module shares one box convention: corner format ``(x1, y1, x2, y2)`` in
pixels, area without the +1 convention.  This script walks through overlap,
the delta parameterization used by the regression heads, and the refinement
of coarse PMC-style roles into the 18 detection classes.
"""

import json

import torch

from cached_det.geometry import Box, decode_delta, encode_delta, iou, normalize_box
from cached_det.taxonomy import (SourceAnnotation, category_counts, convert_source_chart,
                                 parse_source_document, refine)

# Overlap of two offset squares: intersection 1, union 7.
a, b = Box(0, 0, 2, 2), Box(1, 1, 3, 3)
print("IoU:", round(iou(a, b), 6))

# Regression targets are centre offsets scaled by the proposal size plus log
# size ratios; decoding inverts them exactly.
proposal, target = Box(10, 10, 50, 30), Box(12, 8, 60, 33)
delta = encode_delta(proposal, target)
print("delta:", [round(v, 4) for v in delta.as_tuple()])
print("round trip:", decode_delta(proposal, delta))

# Coordinates handed to the positional encoder are fractions of the image size.
print("normalized:", normalize_box(target, 320, 240))

# %%
# Refining a source chart
# -----------------------
# The source annotations only say "tick mark" or "axis title".  Refinement
# splits them into x/y variants by their position relative to the plot area,
# then adds the synthesized axis and legend areas.


def src(i, role, box):
    return SourceAnnotation(Box(*box), role, id=i)


chart = [
    src(1, "plot area", (50, 20, 250, 180)),
    src(2, "tick mark", (99, 180, 101, 185)), src(3, "tick label", (92, 187, 108, 197)),
    src(4, "tick mark", (149, 180, 151, 185)), src(5, "tick label", (142, 187, 158, 197)),
    src(6, "tick mark", (45, 59, 50, 61)), src(7, "tick label", (25, 55, 42, 65)),
    src(8, "axis title", (120, 202, 180, 214)), src(9, "axis title", (5, 60, 15, 140)),
    src(10, "legend marker", (260, 30, 268, 38)), src(11, "legend label", (272, 29, 300, 39)),
]
for box in refine(chart):
    print(f"{box.id:>3} {box.category:<14} {box.box.as_tuple()}")
print({k: v for k, v in category_counts(refine(chart)).items() if v})

# %%
# The same chart as a source JSON document, converted the way the
# ``cached-det convert`` command does it.
doc = {"file_name": "demo.png", "width": 320, "height": 240,
       "annotations": [{"id": s.id, "role": s.raw_category, "bbox": s.box.to_xywh()} for s in chart]}
parsed = parse_source_document(json.dumps(doc))[0]
converted = convert_source_chart(parsed, image_id=1)
print(len(converted.boxes), "refined boxes for", converted.file_name)

# The box tensors used by the detector follow the same convention.
print(torch.tensor([target.as_tuple()]))
