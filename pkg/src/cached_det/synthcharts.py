"""Deterministic synthetic bar/line/scatter charts with 18-class ground truth.

Every random choice is drawn from a generator seeded by ``ChartSpec.seed``,
and ranges (sizes, probabilities, palette, vocabulary) come from a JSON
config, ``data/synth_config.json`` by default.  Text is drawn with the font
bundled in Pillow, so output does not depend on system fonts.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .geometry import Box
from .taxonomy import (ChartAnnotations, LabeledBox, synthesize_structure_areas,
                       to_dataset_json)

CHART_TYPES = ("bar", "line", "scatter")
MIN_PLOT_WIDTH = 80
MIN_PLOT_HEIGHT = 60


class GenerationError(ValueError):
    """The requested chart cannot be laid out (usually: image too small)."""


def load_config(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("cached_det").joinpath("data/synth_config.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


@dataclass(frozen=True)
class ChartSpec:
    seed: int
    chart_type: str = "bar"
    width: int = 320
    height: int = 256
    n_series: int = 1
    n_ticks: int = 5
    has_legend: bool = True
    has_chart_title: bool = True

    def __post_init__(self):
        if self.chart_type not in CHART_TYPES:
            raise ValueError(f"chart_type must be one of {CHART_TYPES}, got {self.chart_type!r}")
        if not 1 <= self.n_series <= 4:
            raise ValueError(f"n_series must be in 1..4, got {self.n_series}")
        if not 3 <= self.n_ticks <= 10:
            raise ValueError(f"n_ticks must be in 3..10, got {self.n_ticks}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")


@dataclass
class ChartSample:
    image: np.ndarray  # H x W x 3, uint8
    ground_truth: list[LabeledBox]
    spec: ChartSpec

    def png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.image).save(buf, format="PNG")
        return buf.getvalue()


def random_spec(seed: int, config: dict | None = None) -> ChartSpec:
    """Sample a :class:`ChartSpec` from the config ranges, deterministically per seed."""
    cfg = config or load_config()
    rng = np.random.default_rng([seed, 1])
    return ChartSpec(
        seed=seed,
        chart_type=str(rng.choice(cfg["chart_types"])),
        width=int(rng.integers(cfg["width"][0], cfg["width"][1] + 1)),
        height=int(rng.integers(cfg["height"][0], cfg["height"][1] + 1)),
        n_series=int(rng.integers(cfg["n_series"][0], cfg["n_series"][1] + 1)),
        n_ticks=int(rng.integers(cfg["n_ticks"][0], cfg["n_ticks"][1] + 1)),
        has_legend=bool(rng.random() < cfg["p_legend"]),
        has_chart_title=bool(rng.random() < cfg["p_chart_title"]),
    )


def _text_mask(text: str, font, rotate: bool = False) -> Image.Image:
    """Tight ink mask of ``text``; the mask size is the annotation box size."""
    left, top, right, bottom = font.getbbox(text)
    layer = Image.new("L", (right + 4, bottom + 4), 0)
    ImageDraw.Draw(layer).text((2, 2), text, font=font, fill=255)
    layer = layer.crop(layer.getbbox())
    if rotate:
        layer = layer.rotate(90, expand=True)
    return layer


def _fmt(value: float, step: float) -> str:
    if step >= 1:
        return f"{value:.0f}"
    return f"{value:.1f}"


class _Chart:
    def __init__(self, spec: ChartSpec):
        self.image = Image.new("RGB", (spec.width, spec.height), (255, 255, 255))
        self.draw = ImageDraw.Draw(self.image)
        self.boxes: list[tuple[Box, str]] = []

    def text(self, mask: Image.Image, x: float, y: float, category: str | None,
             color=(0, 0, 0)) -> Box:
        x, y = int(round(x)), int(round(y))
        self.image.paste(color, (x, y), mask)
        box = Box(x, y, x + mask.width, y + mask.height)
        if category is not None:
            self.boxes.append((box, category))
        return box

    def rect(self, x1: int, y1: int, x2: int, y2: int, color, category: str | None = None,
             pad: int = 0) -> Box:
        """Fill pixels ``[x1, x2) x [y1, y2)`` and optionally annotate (padded)."""
        self.draw.rectangle((x1, y1, x2 - 1, y2 - 1), fill=color)
        box = Box(x1 - pad, y1 - pad, x2 + pad, y2 + pad)
        if category is not None:
            self.boxes.append((box, category))
        return box

    def dot(self, cx: int, cy: int, r: int, color) -> Box:
        self.draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=color)
        return Box(cx - r, cy - r, cx + r + 1, cy + r + 1)


def generate(spec: ChartSpec, config: dict | None = None) -> ChartSample:
    cfg = config or load_config()
    rng = np.random.default_rng(spec.seed)
    W, H = spec.width, spec.height
    words = cfg["words"]
    palette = [tuple(c) for c in cfg["palette"]]

    def pick(key, n=None):
        pool = words[key]
        if n is None:
            return str(pool[int(rng.integers(len(pool)))])
        idx = rng.permutation(len(pool))[:n]
        return [str(pool[i]) for i in idx]

    def irange(key):
        lo, hi = cfg[key]
        return int(rng.integers(lo, hi + 1))

    font_size = irange("font_size")
    font = ImageFont.load_default(size=font_size)
    small_font = ImageFont.load_default(size=max(font_size - 2, 8))
    title_font = ImageFont.load_default(size=irange("title_font_size"))
    tick_len = irange("tick_length")
    pad = int(cfg["tick_mark_padding"])
    n_y = irange("n_y_ticks")
    colors = [palette[i] for i in rng.permutation(len(palette))[:spec.n_series]]

    kind = spec.chart_type
    has_legend_title = spec.has_legend and rng.random() < cfg["p_legend_title"]
    has_value_labels = kind == "bar" and spec.n_series == 1 and rng.random() < cfg["p_value_labels"]
    has_mark_labels = kind != "bar" and rng.random() < cfg["p_mark_labels"]
    has_grouping = kind == "bar" and spec.n_ticks >= 4 and rng.random() < cfg["p_tick_grouping"]
    has_others = rng.random() < cfg["p_others"]
    has_grid = rng.random() < cfg["p_gridlines"]
    has_frame = rng.random() < cfg["p_frame"]

    # text content
    y_step = float(rng.choice(cfg["y_steps"]))
    y_values = [j * y_step for j in range(n_y)]
    y_max = y_values[-1]
    y_masks = [_text_mask(_fmt(v, y_step), font) for v in y_values]
    if kind == "bar":
        cats = words["categories"]
        if spec.n_ticks <= len(cats):
            x_texts = [str(cats[i]) for i in rng.permutation(len(cats))[:spec.n_ticks]]
        else:
            x_texts = [chr(ord("A") + i) for i in range(spec.n_ticks)]
    else:
        x_step = int(rng.choice([1, 2, 5, 10]))
        x_start = int(rng.integers(0, 3)) * x_step
        x_texts = [str(x_start + i * x_step) for i in range(spec.n_ticks)]
    x_masks = [_text_mask(t, font) for t in x_texts]
    x_title = _text_mask(pick("x_axis"), font)
    y_title = _text_mask(pick("y_axis"), font, rotate=True)
    title = _text_mask(pick("title"), title_font) if spec.has_chart_title else None
    others = _text_mask(pick("others"), small_font) if has_others else None
    series_names = pick("series", spec.n_series)
    legend_masks = [_text_mask(s, font) for s in series_names] if spec.has_legend else []
    legend_title = _text_mask(pick("legend_title"), font) if has_legend_title else None
    marker_size = 8

    # layout
    top = 6 + (title.height + 6 if title is not None else 4)
    max_y_label = max(m.width for m in y_masks)
    left = 4 + y_title.width + 4 + max_y_label + 3 + tick_len
    x_label_h = max(m.height for m in x_masks)
    group_h = x_label_h + 4 if has_grouping else 0
    bottom = tick_len + 3 + x_label_h + group_h + 4 + x_title.height + 4
    if others is not None:
        bottom += others.height + 3
    if spec.has_legend:
        entry_w = marker_size + 4 + max(m.width for m in legend_masks)
        legend_w = max(entry_w, legend_title.width if legend_title is not None else 0)
        right = legend_w + 12
    else:
        right = 10
    px1, py1, px2, py2 = left, top, W - right, H - bottom
    pw, ph = px2 - px1, py2 - py1
    if pw < MIN_PLOT_WIDTH or ph < MIN_PLOT_HEIGHT:
        raise GenerationError(f"{W}x{H} leaves a {pw}x{ph} plot area; "
                              f"need at least {MIN_PLOT_WIDTH}x{MIN_PLOT_HEIGHT}")
    spacing = pw / spec.n_ticks
    if max(m.width for m in x_masks) > spacing - 3:
        x_masks = [_text_mask(chr(ord("A") + i), small_font) for i in range(spec.n_ticks)]
        if max(m.width for m in x_masks) > spacing - 2:
            raise GenerationError(f"{spec.n_ticks} ticks do not fit a {pw}px wide plot")
    if title is not None and title.width > W - 8:
        raise GenerationError("chart title wider than the image")
    if x_title.width > W - 8 or y_title.height > ph + bottom:
        raise GenerationError("axis title does not fit")
    legend_h = (legend_title.height + 4 if legend_title is not None else 0) + \
        sum(max(marker_size, m.height) + 4 for m in legend_masks)
    if spec.has_legend and legend_h > H - top - 4:
        raise GenerationError("legend does not fit vertically")

    chart = _Chart(spec)
    usable = ph - 10

    def y_of(v: float) -> int:
        return int(round(py2 - 1 - v / y_max * usable))

    x_centers = [int(round(px1 + (i + 0.5) * spacing)) for i in range(spec.n_ticks)]
    y_ticks = [y_of(v) for v in y_values]

    # plot area background structure
    grid_color = (225, 225, 225)
    if has_grid:
        for y in y_ticks[1:]:
            chart.draw.line((px1 + 1, y, px2 - 1, y), fill=grid_color)
    axis_color = (0, 0, 0)
    if has_frame:
        chart.draw.rectangle((px1, py1, px2 - 1, py2 - 1), outline=axis_color)
    else:
        chart.draw.line((px1, py1, px1, py2 - 1), fill=axis_color)
        chart.draw.line((px1, py2 - 1, px2 - 1, py2 - 1), fill=axis_color)

    # data marks (not annotated)
    value_label_boxes = []
    mark_points = []
    if kind == "bar":
        group_w = spacing * 0.7
        bar_w = max(int(group_w / spec.n_series), 2)
        cap = 0.8 if has_value_labels else 0.97
        for i, cx in enumerate(x_centers):
            start = int(round(cx - group_w / 2))
            for s in range(spec.n_series):
                v = float(rng.uniform(0.15, cap)) * y_max
                bx = start + s * bar_w
                top_y = y_of(v)
                chart.rect(bx, top_y, bx + bar_w - 1, py2 - 1, colors[s])
                if has_value_labels:
                    value_label_boxes.append((v, cx, top_y))
    elif kind == "line":
        for s in range(spec.n_series):
            pts = [(cx, y_of(float(rng.uniform(0.1, 0.95)) * y_max)) for cx in x_centers]
            chart.draw.line(pts, fill=colors[s], width=2)
            for p in pts:
                chart.dot(p[0], p[1], 2, colors[s])
            mark_points.extend(pts)
    else:
        for s in range(spec.n_series):
            n = int(rng.integers(8, 16))
            for _ in range(n):
                cx = int(rng.uniform(px1 + 6, px2 - 6))
                cy = y_of(float(rng.uniform(0.05, 0.95)) * y_max)
                chart.dot(cx, cy, 3, colors[s])
                mark_points.append((cx, cy))

    for v, cx, top_y in value_label_boxes:
        m = _text_mask(_fmt(v, y_step / 10 if y_step < 10 else y_step), small_font)
        chart.text(m, cx - m.width / 2, top_y - m.height - 2, "value-label")
    if has_mark_labels and mark_points:
        n_labels = min(len(mark_points), int(rng.integers(1, 3)))
        for k in rng.permutation(len(mark_points))[:n_labels]:
            mx, my = mark_points[int(k)]
            m = _text_mask(pick("mark"), small_font)
            tx = min(max(mx + 4, px1 + 2), px2 - m.width - 2)
            ty = min(max(my - m.height - 3, py1 + 2), py2 - m.height - 3)
            chart.text(m, tx, ty, "mark-label")

    # axes: tick marks, tick labels, titles
    for cx in x_centers:
        chart.rect(cx - 1, py2, cx + 1, py2 + tick_len, axis_color, "x-tick-mark", pad=pad)
    label_top = py2 + tick_len + 3
    for cx, m in zip(x_centers, x_masks):
        chart.text(m, cx - m.width / 2, label_top, "x-tick-label")
    for y in y_ticks:
        chart.rect(px1 - tick_len, y - 1, px1, y + 1, axis_color, "y-tick-mark", pad=pad)
    for y, m in zip(y_ticks, y_masks):
        chart.text(m, px1 - tick_len - 3 - m.width, y - m.height / 2, "y-tick-label")

    cursor = label_top + x_label_h + 4
    if has_grouping:
        split = spec.n_ticks // 2
        names = pick("grouping", 2)
        for name, (a, b) in zip(names, ((0, split), (split, spec.n_ticks))):
            m = _text_mask(name, small_font)
            span_mid = (x_centers[a] + x_centers[b - 1]) / 2
            if m.width < (b - a) * spacing:
                chart.text(m, span_mid - m.width / 2, cursor, "tick-grouping")
        cursor += group_h
    chart.text(x_title, px1 + pw / 2 - x_title.width / 2, cursor, "x-axis-title")
    chart.text(y_title, 4, py1 + ph / 2 - y_title.height / 2, "y-axis-title")
    if title is not None:
        chart.text(title, W / 2 - title.width / 2, 6, "chart-title", color=(20, 20, 20))
    if others is not None:
        chart.text(others, 4, H - 3 - others.height, "others", color=(60, 60, 60))

    if spec.has_legend:
        lx, ly = px2 + 8, py1
        if legend_title is not None:
            chart.text(legend_title, lx, ly, "legend-title")
            ly += legend_title.height + 4
        for color, m in zip(colors, legend_masks):
            row_h = max(marker_size, m.height)
            my = ly + (row_h - marker_size) // 2
            if kind == "bar":
                chart.rect(lx, my, lx + marker_size, my + marker_size, color, "legend-marker")
            else:
                b = chart.dot(lx + marker_size // 2, my + marker_size // 2, 3, color)
                chart.boxes.append((b, "legend-marker"))
            chart.text(m, lx + marker_size + 4, ly + (row_h - m.height) / 2, "legend-label")
            ly += row_h + 4

    plot_area = Box(px1, py1, px2, py2)
    chart.boxes.append((plot_area, "plot-area"))
    for box, category in chart.boxes:
        if box.x1 < 0 or box.y1 < 0 or box.x2 > W or box.y2 > H:
            raise GenerationError(f"{category} box {box.as_tuple()} leaves the {W}x{H} image")

    truth = [LabeledBox(box, category, id=i + 1) for i, (box, category) in enumerate(chart.boxes)]
    truth += synthesize_structure_areas(truth, plot_area)
    return ChartSample(image=np.asarray(chart.image, dtype=np.uint8).copy(),
                       ground_truth=truth, spec=spec)


def generate_corpus(n: int, base_seed: int, out_dir: str | Path,
                    config: dict | None = None) -> Path:
    """Write ``n`` charts (seeds ``base_seed .. base_seed+n-1``) plus ``annotations.json``.

    Returns the path of the dataset JSON.  Image ids are ``1..n`` in seed order.
    """
    if n < 1:
        raise ValueError(f"corpus size must be at least 1, got {n}")
    cfg = config or load_config()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        seed = base_seed + i
        sample = generate(random_spec(seed, cfg), cfg)
        file_name = f"images/chart_{seed:06d}.png"
        (out / file_name).write_bytes(sample.png_bytes())
        records.append(ChartAnnotations(id=i + 1, file_name=file_name,
                                        width=sample.spec.width, height=sample.spec.height,
                                        boxes=sample.ground_truth))
    index = out / "annotations.json"
    index.write_bytes(to_dataset_json(records))
    (out / "specs.json").write_text(json.dumps(
        [asdict(random_spec(base_seed + i, cfg)) for i in range(n)], indent=1))
    return index


def class_histogram(samples: Sequence[ChartSample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in samples:
        for b in s.ground_truth:
            counts[b.category] = counts.get(b.category, 0) + 1
    return counts
