"""The 18-class chart element schema and conversion from PMC-style annotations.

PMC-style annotations label axis titles, tick labels and tick marks without
saying which axis they belong to.  :func:`separate_axis_elements` splits them
into x/y classes (honouring an explicit axis association when the source has
one, otherwise by position relative to the plot area), and
:func:`synthesize_structure_areas` adds the x-axis, y-axis and legend area
boxes as tight unions of their constituents.

Category ids are 1..18 in the order of :data:`CATEGORIES`; id 0 is reserved
for background inside the detector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, union_box

CATEGORIES: tuple[str, ...] = (
    "x-axis-title",
    "y-axis-title",
    "x-tick-label",
    "y-tick-label",
    "x-tick-mark",
    "y-tick-mark",
    "chart-title",
    "legend-marker",
    "legend-label",
    "legend-title",
    "value-label",
    "mark-label",
    "tick-grouping",
    "others",
    "plot-area",
    "x-axis-area",
    "y-axis-area",
    "legend-area",
)
NUM_CLASSES = len(CATEGORIES)
SKELETON_CATEGORIES = CATEGORIES[:14]
AREA_CATEGORIES = CATEGORIES[14:]

CATEGORY_ID = {name: i + 1 for i, name in enumerate(CATEGORIES)}
CATEGORY_NAME = {i + 1: name for i, name in enumerate(CATEGORIES)}

# PMC vocabulary
AXIS_ROLES = ("axis title", "tick label", "tick mark")
PMC_ROLES: tuple[str, ...] = (
    "axis title", "tick label", "tick mark", "chart title", "legend marker",
    "legend label", "legend title", "value label", "mark label",
    "tick grouping", "others", "plot area",
)
_AXIS_SPLIT = {
    "axis title": ("x-axis-title", "y-axis-title"),
    "tick label": ("x-tick-label", "y-tick-label"),
    "tick mark": ("x-tick-mark", "y-tick-mark"),
}
_ONE_TO_ONE = {
    "chart title": "chart-title",
    "legend marker": "legend-marker",
    "legend label": "legend-label",
    "legend title": "legend-title",
    "value label": "value-label",
    "mark label": "mark-label",
    "tick grouping": "tick-grouping",
    "others": "others",
    "plot area": "plot-area",
}
# refined category -> PMC role; structural areas other than plot area have none
PMC_ROLE_OF: dict[str, str | None] = {
    **{x: role for role, pair in _AXIS_SPLIT.items() for x in pair},
    **{refined: role for role, refined in _ONE_TO_ONE.items()},
    "x-axis-area": None,
    "y-axis-area": None,
    "legend-area": None,
}

AXIS_TOLERANCE_PX = 2.0

_AREA_CONSTITUENTS = {
    "x-axis-area": ("x-tick-mark", "x-tick-label", "x-axis-title"),
    "y-axis-area": ("y-tick-mark", "y-tick-label", "y-axis-title"),
    "legend-area": ("legend-marker", "legend-label", "legend-title"),
}


class SchemaError(ValueError):
    """Annotation or dataset content that does not fit the schema."""


class RefinementError(ValueError):
    """Axis separation cannot proceed (e.g. the plot area is missing)."""


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    category: str
    id: int = 0
    score: float | None = None

    def __post_init__(self):
        if self.category not in CATEGORY_ID:
            raise SchemaError(f"unknown category {self.category!r}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise SchemaError(f"score must lie in [0, 1], got {self.score}")

    @property
    def category_id(self) -> int:
        return CATEGORY_ID[self.category]

    @property
    def is_prediction(self) -> bool:
        return self.score is not None


@dataclass(frozen=True)
class SourceAnnotation:
    box: Box
    raw_category: str
    axis_association: str | None = None
    id: int = 0

    def __post_init__(self):
        if self.axis_association not in (None, "x", "y"):
            raise SchemaError(f"axis association must be 'x', 'y' or absent, "
                              f"got {self.axis_association!r}")


@dataclass
class ChartAnnotations:
    """One image of a detection dataset with its labeled boxes."""

    id: int
    file_name: str
    width: int
    height: int
    boxes: list[LabeledBox] = field(default_factory=list)


def _axis_of(box: Box, plot_area: Box) -> str:
    cx, cy = box.center
    below = cy > plot_area.y2 - AXIS_TOLERANCE_PX
    left = cx < plot_area.x1 + AXIS_TOLERANCE_PX
    if below and not left:
        return "x"
    if left and not below:
        return "y"
    # ambiguous: nearest of bottom edge / left edge, ties go to x
    d_bottom = abs(cy - plot_area.y2)
    d_left = abs(cx - plot_area.x1)
    return "x" if d_bottom <= d_left else "y"


def find_plot_area(annotations: Iterable[SourceAnnotation]) -> Box:
    plots = [a.box for a in annotations if a.raw_category in ("plot area", "plot-area")]
    if len(plots) != 1:
        raise RefinementError(f"expected exactly one plot area annotation, found {len(plots)}")
    return plots[0]


def separate_axis_elements(annotations: Sequence[SourceAnnotation],
                           plot_area: Box | None = None) -> list[LabeledBox]:
    """Relabel PMC-style annotations into refined categories.

    Already-refined category names are accepted and passed through, which
    makes the refinement idempotent.
    """
    if plot_area is None:
        plot_area = find_plot_area(annotations)
    out = []
    for ann in annotations:
        raw = ann.raw_category
        if raw in _AXIS_SPLIT:
            axis = ann.axis_association or _axis_of(ann.box, plot_area)
            x_name, y_name = _AXIS_SPLIT[raw]
            category = x_name if axis == "x" else y_name
        elif raw in _ONE_TO_ONE:
            category = _ONE_TO_ONE[raw]
        elif raw in CATEGORY_ID:
            category = raw
        else:
            raise SchemaError(f"unknown source category {raw!r} (annotation id {ann.id})")
        out.append(LabeledBox(ann.box, category, id=ann.id))
    return out


def synthesize_structure_areas(refined: Sequence[LabeledBox],
                               plot_area: Box | None = None) -> list[LabeledBox]:
    """Return the x-axis, y-axis and legend area boxes missing from ``refined``.

    Each area is the tight union of its constituents and is omitted when
    there are none, or when the input already carries that area.  The plot
    area is never synthesized; it passes through with the input.
    """
    present = {b.category for b in refined}
    next_id = max((b.id for b in refined), default=0) + 1
    added = []
    for area, parts in _AREA_CONSTITUENTS.items():
        if area in present:
            continue
        members = [b.box for b in refined if b.category in parts]
        if not members:
            continue
        added.append(LabeledBox(union_box(members), area, id=next_id))
        next_id += 1
    return added


def refine(annotations: Sequence[SourceAnnotation],
           plot_area: Box | None = None) -> list[LabeledBox]:
    """Axis separation followed by structural-area synthesis."""
    refined = separate_axis_elements(annotations, plot_area)
    return refined + synthesize_structure_areas(refined, plot_area)


def to_pmc_role(category: str) -> str | None:
    return PMC_ROLE_OF[category]


def category_counts(boxes: Iterable[LabeledBox]) -> dict[str, int]:
    counts = {name: 0 for name in CATEGORIES}
    for b in boxes:
        counts[b.category] += 1
    return counts


# dataset JSON

def categories_json() -> list[dict]:
    return [{"id": CATEGORY_ID[name], "name": name,
             "supercategory": "structural-area" if name in AREA_CATEGORIES else "skeleton"}
            for name in CATEGORIES]


def _box_fields(box: Box) -> dict:
    return {"bbox": box.to_xywh(), "area": box.area}


def to_dataset_dict(samples: Sequence[ChartAnnotations]) -> dict:
    images, annotations = [], []
    next_ann_id = 1
    for s in samples:
        images.append({"id": s.id, "file_name": s.file_name,
                       "width": s.width, "height": s.height})
        for b in s.boxes:
            record = {"id": next_ann_id, "image_id": s.id,
                      "category_id": b.category_id, **_box_fields(b.box),
                      "iscrowd": 0, "source_id": b.id}
            if b.score is not None:
                record["score"] = b.score
            annotations.append(record)
            next_ann_id += 1
    return {"images": images, "annotations": annotations, "categories": categories_json()}


def to_dataset_json(samples: Sequence[ChartAnnotations]) -> bytes:
    return json.dumps(to_dataset_dict(samples), indent=1, sort_keys=True).encode("utf-8")


def _require(record: dict, key: str, where: str, types):
    if key not in record:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise SchemaError(f"{where}.{key}: expected {types}, got {type(value).__name__}")
    return value


def parse_bbox(value, where: str) -> Box:
    if not isinstance(value, list) or len(value) != 4 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise SchemaError(f"{where}.bbox: expected [x, y, w, h] numbers, got {value!r}")
    if value[2] < 0 or value[3] < 0:
        raise SchemaError(f"{where}.bbox: negative width or height in {value!r}")
    try:
        return Box.from_xywh(value)
    except ValueError as exc:
        raise SchemaError(f"{where}.bbox: {exc}") from None


def parse_category_id(value, where: str) -> str:
    if isinstance(value, bool) or not isinstance(value, int) or value not in CATEGORY_NAME:
        raise SchemaError(f"{where}.category_id: {value!r} is not a category id in 1..{NUM_CLASSES}")
    return CATEGORY_NAME[value]


def load_json_bytes(data: bytes | str, what: str = "document"):
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed {what}: {exc.msg} at line {exc.lineno}, "
                          f"column {exc.colno}") from None


def from_dataset_dict(doc: dict) -> list[ChartAnnotations]:
    if not isinstance(doc, dict):
        raise SchemaError("dataset: top level must be an object")
    images = _require(doc, "images", "dataset", list)
    annotations = _require(doc, "annotations", "dataset", list)
    samples: dict[int, ChartAnnotations] = {}
    for i, img in enumerate(images):
        where = f"images[{i}]"
        if not isinstance(img, dict):
            raise SchemaError(f"{where}: expected an object")
        image_id = _require(img, "id", where, int)
        if image_id in samples:
            raise SchemaError(f"{where}.id: duplicate image id {image_id}")
        samples[image_id] = ChartAnnotations(
            id=image_id,
            file_name=_require(img, "file_name", where, str),
            width=_require(img, "width", where, int),
            height=_require(img, "height", where, int),
        )
    for i, ann in enumerate(annotations):
        where = f"annotations[{i}]"
        if not isinstance(ann, dict):
            raise SchemaError(f"{where}: expected an object")
        image_id = _require(ann, "image_id", where, int)
        if image_id not in samples:
            raise SchemaError(f"{where}.image_id: unknown image id {image_id}")
        box = parse_bbox(ann.get("bbox"), where)
        category = parse_category_id(ann.get("category_id"), where)
        source_id = ann.get("source_id", ann.get("id", 0))
        score = ann.get("score")
        try:
            samples[image_id].boxes.append(LabeledBox(box, category, id=source_id, score=score))
        except SchemaError as exc:
            raise SchemaError(f"{where}: {exc}") from None
    return list(samples.values())


def from_dataset_json(data: bytes | str) -> list[ChartAnnotations]:
    return from_dataset_dict(load_json_bytes(data, "dataset JSON"))


# PMC-style source annotations

@dataclass
class SourceChart:
    """One chart in the PMC-style source format accepted by the converter."""

    file_name: str
    width: int
    height: int
    annotations: list[SourceAnnotation] = field(default_factory=list)


def parse_source_chart(doc, where: str = "chart") -> SourceChart:
    """Parse ``{"file_name", "width", "height", "annotations": [{"id", "role",
    "bbox": [x, y, w, h], "axis"?}]}``; ``axis`` is ``"x"``, ``"y"`` or absent."""
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected an object")
    chart = SourceChart(file_name=_require(doc, "file_name", where, str),
                        width=_require(doc, "width", where, int),
                        height=_require(doc, "height", where, int))
    for i, ann in enumerate(_require(doc, "annotations", where, list)):
        at = f"{where}.annotations[{i}]"
        if not isinstance(ann, dict):
            raise SchemaError(f"{at}: expected an object")
        role = _require(ann, "role", at, str)
        if role not in _AXIS_SPLIT and role not in _ONE_TO_ONE and role not in CATEGORY_ID:
            raise SchemaError(f"{at}.role: unknown category {role!r}")
        axis = ann.get("axis")
        try:
            chart.annotations.append(SourceAnnotation(parse_bbox(ann.get("bbox"), at), role,
                                                      axis, id=ann.get("id", i + 1)))
        except SchemaError as exc:
            raise SchemaError(f"{at}: {exc}") from None
    return chart


def parse_source_document(data: bytes | str, what: str = "source file") -> list[SourceChart]:
    """A source file holds one chart object or ``{"charts": [...]}``."""
    doc = load_json_bytes(data, what)
    if isinstance(doc, dict) and "charts" in doc:
        charts = doc["charts"]
        if not isinstance(charts, list):
            raise SchemaError("charts: expected a list")
        return [parse_source_chart(c, f"charts[{i}]") for i, c in enumerate(charts)]
    return [parse_source_chart(doc)]


def _largest_cluster(values: np.ndarray, tol: float) -> np.ndarray:
    """Indices of the largest group of values within ``tol`` of each other."""
    order = np.argsort(values, kind="stable")
    best = order[:0]
    start = 0
    for end in range(len(order)):
        while values[order[end]] - values[order[start]] > tol:
            start += 1
        if end - start + 1 > len(best):
            best = order[start:end + 1]
    return best


def estimate_plot_area(annotations: Sequence[SourceAnnotation], tol: float = 3.0) -> Box:
    """Plot area recovered from tick marks when the source lacks one.

    x-axis marks form the largest row of equal centre height, y-axis marks
    the largest column of equal centre abscissa (explicit axis associations
    take precedence).  The box spans from the y marks' right edge to the
    last x mark, and from the top y mark to the x marks' top edge.
    """
    marks = [a for a in annotations if a.raw_category in ("tick mark", "x-tick-mark", "y-tick-mark")]
    xs = [a.box for a in marks if a.axis_association == "x" or a.raw_category == "x-tick-mark"]
    ys = [a.box for a in marks if a.axis_association == "y" or a.raw_category == "y-tick-mark"]
    free = [a.box for a in marks if a.axis_association is None and a.raw_category == "tick mark"]
    if free:
        cy = np.array([b.center[1] for b in free])
        row = set(_largest_cluster(cy, tol).tolist()) if not xs else set()
        rest = [b for i, b in enumerate(free) if i not in row]
        xs += [free[i] for i in sorted(row)]
        if not ys and rest:
            cx = np.array([b.center[0] for b in rest])
            ys += [rest[i] for i in sorted(_largest_cluster(cx, tol).tolist())]
    if len(xs) < 2 or len(ys) < 2:
        raise RefinementError("cannot estimate the plot area: need at least two tick marks per axis")
    x1 = max(b.x2 for b in ys)
    y2 = min(b.y1 for b in xs)
    y1 = min(b.center[1] for b in ys)
    x2 = max(b.center[0] for b in xs)
    if x2 <= x1 or y2 <= y1:
        raise RefinementError("tick marks do not enclose a plot area")
    return Box(x1, y1, x2, y2)


def convert_source_chart(chart: SourceChart, image_id: int, plot_area_source: str = "annotation"
                         ) -> ChartAnnotations:
    """Refine one source chart into the 18-class schema.

    With ``plot_area_source="detect"`` a missing plot area is estimated from
    the tick marks and added to the output.
    """
    if plot_area_source not in ("annotation", "detect"):
        raise ValueError(f"plot_area_source must be 'annotation' or 'detect', got {plot_area_source!r}")
    anns = list(chart.annotations)
    has_plot = any(a.raw_category in ("plot area", "plot-area") for a in anns)
    if not has_plot and plot_area_source == "detect":
        next_id = max((a.id for a in anns), default=0) + 1
        anns.append(SourceAnnotation(estimate_plot_area(anns), "plot area", id=next_id))
    boxes = refine(anns)
    return ChartAnnotations(image_id, chart.file_name, chart.width, chart.height, boxes)
