import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cached_det.synthcharts import (ChartSpec, GenerationError, class_histogram, generate,
                                    generate_corpus, random_spec)
from cached_det.taxonomy import AREA_CATEGORIES, CATEGORIES, category_counts, from_dataset_json


def cats(sample):
    return category_counts(sample.ground_truth)


def test_deterministic():
    spec = ChartSpec(seed=11, chart_type="line", n_series=3)
    a, b = generate(spec), generate(spec)
    assert a.ground_truth == b.ground_truth
    assert np.array_equal(a.image, b.image)
    assert a.png_bytes() == b.png_bytes()


def test_no_legend():
    c = cats(generate(ChartSpec(seed=3, has_legend=False, n_series=2)))
    assert all(c[k] == 0 for k in ("legend-marker", "legend-label", "legend-title", "legend-area"))


def test_no_title():
    assert cats(generate(ChartSpec(seed=3, has_chart_title=False)))["chart-title"] == 0


@pytest.mark.parametrize("seed", range(5))
def test_bar_tick_count(seed):
    c = cats(generate(ChartSpec(seed=seed, chart_type="bar", n_ticks=5)))
    assert c["x-tick-mark"] == 5 and c["x-tick-label"] == 5


def test_too_small():
    with pytest.raises(GenerationError):
        generate(ChartSpec(seed=0, width=90, height=70))


def test_spec_validation():
    with pytest.raises(ValueError):
        ChartSpec(seed=0, chart_type="pie")
    with pytest.raises(ValueError):
        ChartSpec(seed=0, n_series=5)
    with pytest.raises(ValueError):
        ChartSpec(seed=0, n_ticks=2)


@settings(max_examples=40)
@given(st.integers(0, 10 ** 6))
def test_sample_invariants(seed):
    s = generate(random_spec(seed))
    h, w = s.image.shape[:2]
    assert (w, h) == (s.spec.width, s.spec.height)
    c = cats(s)
    assert c["plot-area"] == 1
    plot = next(b.box for b in s.ground_truth if b.category == "plot-area")
    for b in s.ground_truth:
        assert 0 <= b.box.x1 and 0 <= b.box.y1 and b.box.x2 <= w and b.box.y2 <= h
        assert b.box.width > 0 and b.box.height > 0
        if b.category == "x-tick-label":
            assert b.box.center[1] > plot.y2
        if b.category == "y-tick-label":
            assert b.box.center[0] < plot.x1
    prefixes = {"x-axis-area": "x-", "y-axis-area": "y-", "legend-area": "legend-"}
    for area in (b for b in s.ground_truth if b.category in prefixes):
        parts = [b for b in s.ground_truth
                 if b.category.startswith(prefixes[area.category]) and b.category not in AREA_CATEGORIES]
        assert parts and all(area.box.contains(p.box) for p in parts)


def test_histogram_imbalance():
    hist = class_histogram([generate(random_spec(seed)) for seed in range(200)])
    for tick in ("x-tick-label", "y-tick-label", "x-tick-mark", "y-tick-mark"):
        assert hist[tick] >= 3 * hist["chart-title"]
    # every class appears somewhere in the corpus
    assert all(hist.get(name, 0) > 0 for name in CATEGORIES)


def test_corpus(tmp_path):
    p1 = generate_corpus(16, 7, tmp_path / "a")
    p2 = generate_corpus(16, 7, tmp_path / "b")
    assert p1.read_bytes() == p2.read_bytes()
    charts = from_dataset_json(p1.read_bytes())
    assert [c.id for c in charts] == list(range(1, 17))
    assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 16
    assert (tmp_path / "a" / charts[0].file_name).read_bytes() == \
        (tmp_path / "b" / charts[0].file_name).read_bytes()
    specs = json.loads((tmp_path / "a" / "specs.json").read_text())
    assert [s["seed"] for s in specs] == list(range(7, 23))


def test_corpus_needs_one(tmp_path):
    with pytest.raises(ValueError):
        generate_corpus(0, 0, tmp_path)
