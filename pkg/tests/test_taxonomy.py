import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cached_det.geometry import Box
from cached_det.taxonomy import (CATEGORIES, CATEGORY_ID, CATEGORY_NAME, ChartAnnotations,
                                 LabeledBox, RefinementError, SchemaError, SourceAnnotation,
                                 category_counts, convert_source_chart, estimate_plot_area,
                                 from_dataset_json, parse_source_document, refine,
                                 separate_axis_elements, synthesize_structure_areas,
                                 to_dataset_json, to_pmc_role)


def src(i, role, box, axis=None):
    return SourceAnnotation(Box(*box), role, axis, id=i)


# Fixture 1: bar chart with a 3-entry legend and no axis associations.
CHART_1 = [
    src(1, "plot area", (50, 20, 250, 180)),
    src(2, "chart title", (100, 2, 200, 14)),
    src(3, "tick mark", (99, 180, 101, 185)),
    src(4, "tick mark", (149, 180, 151, 185)),
    src(5, "tick mark", (199, 180, 201, 185)),
    src(6, "tick label", (92, 187, 108, 197)),
    src(7, "tick label", (142, 187, 158, 197)),
    src(8, "tick label", (192, 187, 208, 197)),
    src(9, "axis title", (120, 202, 180, 214)),
    src(10, "tick mark", (45, 59, 50, 61)),
    src(11, "tick mark", (45, 119, 50, 121)),
    src(12, "tick label", (25, 55, 42, 65)),
    src(13, "tick label", (25, 115, 42, 125)),
    src(14, "axis title", (5, 60, 15, 140)),
    src(15, "legend marker", (260, 30, 268, 38)),
    src(16, "legend marker", (260, 45, 268, 53)),
    src(17, "legend marker", (260, 60, 268, 68)),
    src(18, "legend label", (272, 29, 300, 39)),
    src(19, "legend label", (272, 44, 310, 54)),
    src(20, "legend label", (272, 59, 295, 69)),
    src(21, "legend title", (258, 14, 290, 26)),
]
EXPECTED_1 = {
    1: "plot-area", 2: "chart-title", 3: "x-tick-mark", 4: "x-tick-mark", 5: "x-tick-mark",
    6: "x-tick-label", 7: "x-tick-label", 8: "x-tick-label", 9: "x-axis-title",
    10: "y-tick-mark", 11: "y-tick-mark", 12: "y-tick-label", 13: "y-tick-label",
    14: "y-axis-title", 15: "legend-marker", 16: "legend-marker", 17: "legend-marker",
    18: "legend-label", 19: "legend-label", 20: "legend-label", 21: "legend-title",
}
AREAS_1 = [("x-axis-area", Box(92, 180, 208, 214), 22),
           ("y-axis-area", Box(5, 55, 50, 140), 23),
           ("legend-area", Box(258, 14, 310, 69), 24)]

# Fixture 2: explicit axis associations override geometry; no legend.
CHART_2 = [
    src(1, "plot area", (40, 10, 200, 150)),
    src(2, "tick mark", (100, 150, 102, 156), axis="y"),
    src(3, "tick label", (30, 60, 38, 70), axis="x"),
    src(4, "axis title", (90, 160, 150, 170)),
    src(5, "value label", (100, 50, 110, 58)),
    src(6, "others", (0, 190, 50, 199)),
    src(7, "mark label", (120, 40, 130, 48)),
    src(8, "tick grouping", (60, 172, 120, 180)),
]
EXPECTED_2 = {1: "plot-area", 2: "y-tick-mark", 3: "x-tick-label", 4: "x-axis-title",
              5: "value-label", 6: "others", 7: "mark-label", 8: "tick-grouping"}
AREAS_2 = [("x-axis-area", Box(30, 60, 150, 170), 9), ("y-axis-area", Box(100, 150, 102, 156), 10)]

# Fixture 3: ambiguous positions resolved by nearest edge, ties to x.
CHART_3 = [
    src(1, "plot area", (50, 50, 150, 150)),
    src(2, "tick label", (35, 155, 45, 165)),   # below and left, equal distance -> x
    src(3, "tick label", (40, 165, 50, 175)),   # below and left, nearer the left edge -> y
    src(4, "tick mark", (99, 99, 101, 101)),     # inside, equal distance -> x
    src(5, "tick mark", (59, 99, 61, 101)),      # inside, nearer the left edge -> y
    src(6, "tick label", (95, 146, 105, 150)),  # centre exactly at the tolerance line -> nearest: x
]
EXPECTED_3 = {1: "plot-area", 2: "x-tick-label", 3: "y-tick-label", 4: "x-tick-mark",
              5: "y-tick-mark", 6: "x-tick-label"}
AREAS_3 = [("x-axis-area", Box(35, 99, 105, 165), 7), ("y-axis-area", Box(40, 99, 61, 175), 8)]

FIXTURES = [(CHART_1, EXPECTED_1, AREAS_1), (CHART_2, EXPECTED_2, AREAS_2),
            (CHART_3, EXPECTED_3, AREAS_3)]


def source_role_counts(anns):
    counts = {}
    for a in anns:
        counts[a.raw_category] = counts.get(a.raw_category, 0) + 1
    return counts


@pytest.mark.parametrize("chart,expected,areas", FIXTURES)
class TestFixtureCharts:
    def test_axis_separation(self, chart, expected, areas):
        out = separate_axis_elements(chart)
        assert {b.id: b.category for b in out} == expected
        # boxes never change
        assert [b.box for b in out] == [a.box for a in chart]

    def test_structural_areas(self, chart, expected, areas):
        refined = separate_axis_elements(chart)
        added = synthesize_structure_areas(refined)
        assert [(b.category, b.box, b.id) for b in added] == areas
        for area in added:
            parts = {"x-axis-area": "x-", "y-axis-area": "y-", "legend-area": "legend-"}[area.category]
            for b in refined:
                if b.category.startswith(parts) and not b.category.endswith("area"):
                    assert area.box.contains(b.box)

    def test_partition(self, chart, expected, areas):
        refined = separate_axis_elements(chart)
        counts = category_counts(refined)
        source = source_role_counts(chart)
        for role, (x, y) in {"tick label": ("x-tick-label", "y-tick-label"),
                             "tick mark": ("x-tick-mark", "y-tick-mark"),
                             "axis title": ("x-axis-title", "y-axis-title")}.items():
            assert counts[x] + counts[y] == source.get(role, 0)
        assert sum(counts.values()) == len(chart)
        assert all(to_pmc_role(b.category) == a.raw_category for a, b in zip(chart, refined))

    def test_refine_is_idempotent(self, chart, expected, areas):
        once = refine(chart)
        again = refine([SourceAnnotation(b.box, b.category, id=b.id) for b in once])
        assert again == once


def test_no_legend_means_no_legend_area():
    added = synthesize_structure_areas(separate_axis_elements(CHART_2))
    assert "legend-area" not in {b.category for b in added}


def test_missing_plot_area():
    with pytest.raises(RefinementError):
        separate_axis_elements(CHART_1[1:])


def test_two_plot_areas():
    with pytest.raises(RefinementError):
        separate_axis_elements(CHART_1 + [src(99, "plot area", (0, 0, 5, 5))])


def test_unknown_source_category():
    with pytest.raises(SchemaError, match="bogus"):
        separate_axis_elements(CHART_1 + [src(99, "bogus", (0, 0, 5, 5))])


def test_bad_axis_association():
    with pytest.raises(SchemaError):
        SourceAnnotation(Box(0, 0, 1, 1), "tick mark", "z")


@given(st.lists(st.tuples(st.floats(0, 300), st.floats(0, 300), st.floats(0.5, 30),
                          st.floats(0.5, 30), st.sampled_from(["tick label", "tick mark", "axis title"])),
                max_size=30))
def test_partition_random(items):
    anns = [src(1, "plot area", (60, 20, 280, 200))]
    anns += [src(i + 2, r, (x, y, x + w, y + h)) for i, (x, y, w, h, r) in enumerate(items)]
    refined = refine(anns)
    counts = category_counts(refined)
    src_counts = source_role_counts(anns)
    assert counts["x-tick-label"] + counts["y-tick-label"] == src_counts.get("tick label", 0)
    assert counts["x-tick-mark"] + counts["y-tick-mark"] == src_counts.get("tick mark", 0)
    assert [b.box for b in refined[:len(anns)]] == [a.box for a in anns]


class TestCategories:
    def test_eighteen_in_order(self):
        assert len(CATEGORIES) == 18
        assert CATEGORY_NAME[5] == "x-tick-mark"
        assert CATEGORY_ID["plot-area"] == 15 and CATEGORY_ID["legend-area"] == 18

    def test_labeled_box_validation(self):
        with pytest.raises(SchemaError):
            LabeledBox(Box(0, 0, 1, 1), "bar")
        with pytest.raises(SchemaError):
            LabeledBox(Box(0, 0, 1, 1), "others", score=1.5)
        assert LabeledBox(Box(0, 0, 1, 1), "others", score=0.3).is_prediction


def two_image_fixture():
    a = ChartAnnotations(1, "a.png", 320, 240, refine(CHART_1))
    b = ChartAnnotations(2, "b.png", 200, 200, refine(CHART_3))
    return [a, b]


class TestDatasetJson:
    def test_round_trip(self):
        samples = two_image_fixture()
        data = to_dataset_json(samples)
        assert from_dataset_json(data) == samples
        assert to_dataset_json(from_dataset_json(data)) == data

    def test_layout(self):
        doc = json.loads(to_dataset_json(two_image_fixture()))
        ann = doc["annotations"][0]
        assert ann["bbox"] == [50, 20, 200, 160] and ann["area"] == 200 * 160
        assert ann["source_id"] == 1 and ann["iscrowd"] == 0
        assert [c["id"] for c in doc["categories"]] == list(range(1, 19))

    def test_category_19_rejected(self):
        doc = json.loads(to_dataset_json(two_image_fixture()))
        doc["annotations"][3]["category_id"] = 19
        with pytest.raises(SchemaError, match=r"annotations\[3\]\.category_id"):
            from_dataset_json(json.dumps(doc))

    def test_syntax_error_has_position(self):
        with pytest.raises(SchemaError, match="line 2, column"):
            from_dataset_json('{"images": [],\n "annotations": [,]}')

    @pytest.mark.parametrize("mutate,where", [
        (lambda d: d["annotations"][0].update(bbox=[0, 0, -1, 2]), r"annotations\[0\]\.bbox"),
        (lambda d: d["annotations"][1].update(image_id=77), r"annotations\[1\]\.image_id"),
        (lambda d: d["images"][0].pop("width"), r"images\[0\]"),
        (lambda d: d.pop("annotations"), "annotations"),
    ])
    def test_field_context(self, mutate, where):
        doc = json.loads(to_dataset_json(two_image_fixture()))
        mutate(doc)
        with pytest.raises(SchemaError, match=where):
            from_dataset_json(json.dumps(doc))


class TestSourceFormat:
    def source_doc(self, anns, axis=True):
        return {"file_name": "c.png", "width": 320, "height": 240, "annotations": [
            {"id": a.id, "role": a.raw_category, "bbox": a.box.to_xywh(),
             **({"axis": a.axis_association} if axis and a.axis_association else {})}
            for a in anns]}

    def test_parse_and_convert(self):
        charts = parse_source_document(json.dumps(self.source_doc(CHART_1)))
        out = convert_source_chart(charts[0], image_id=3)
        assert out.id == 3 and out.boxes == refine(CHART_1)

    def test_multi_chart_document(self):
        doc = {"charts": [self.source_doc(CHART_1), self.source_doc(CHART_2)]}
        charts = parse_source_document(json.dumps(doc))
        assert [len(c.annotations) for c in charts] == [len(CHART_1), len(CHART_2)]
        assert charts[1].annotations[1].axis_association == "y"

    def test_unknown_role_has_context(self):
        doc = self.source_doc(CHART_1)
        doc["annotations"][4]["role"] = "bar"
        with pytest.raises(SchemaError, match=r"annotations\[4\]\.role"):
            parse_source_document(json.dumps(doc))

    def test_detect_plot_area(self):
        no_plot = [a for a in CHART_1 if a.raw_category != "plot area"]
        est = estimate_plot_area(no_plot)
        # y marks end at x=50, x marks start at y=180; top and right at the outermost mark centres
        assert est == Box(50, 60, 200, 180)
        chart = parse_source_document(json.dumps(self.source_doc(no_plot)))[0]
        out = convert_source_chart(chart, 1, "detect")
        cats = {b.id: b.category for b in out.boxes}
        assert all(cats[i] == EXPECTED_1[i] for i in EXPECTED_1 if i != 1)
        with pytest.raises(RefinementError):
            convert_source_chart(chart, 1, "annotation")

    def test_detect_needs_ticks(self):
        with pytest.raises(RefinementError):
            estimate_plot_area([src(1, "chart title", (0, 0, 10, 10))])
