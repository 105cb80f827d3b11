"""Detection metrics: COCO-style AP, text-detection average IoU, role P/R/F, and
F-measure at fixed IoU thresholds.

Detections are passed as ``{image_id: [LabeledBox, ...]}`` with scores;
ground truth as a sequence of :class:`~cached_det.taxonomy.ChartAnnotations`.

Matching rules:

* ``coco_ap`` follows the COCO protocol: per image and class, detections in
  descending score order take the highest-IoU unmatched ground truth above
  the threshold; precision is interpolated at 101 recall points and averaged
  over IoU 0.50:0.05:0.95 and over classes with ground truth.
* ``task2_avg_iou`` ignores classes, pairs boxes greedily by descending IoU
  (one-to-one), and averages matched IoU over all ground truths.
* ``task3_prf`` maps refined classes back to PMC roles and counts a
  detection as correct when it matches (IoU >= 0.5, one-to-one, score order)
  a ground truth with the same role.
* ``bar_fmeasure`` is class-agnostic greedy score-ordered matching at each
  threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import iou_array
from .taxonomy import (CATEGORIES, CATEGORY_ID, ChartAnnotations, LabeledBox, SchemaError,
                       load_json_bytes, parse_bbox, parse_category_id, to_pmc_role)

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, 1e10), "small": (0.0, 32.0 ** 2),
               "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, 1e10)}
MAX_DETS = 100

TEXT_CATEGORIES = ("x-axis-title", "y-axis-title", "x-tick-label", "y-tick-label", "chart-title",
                   "legend-label", "legend-title", "value-label", "mark-label",
                   "tick-grouping", "others")

Detections = Mapping[int, Sequence[LabeledBox]]


class EvalInputError(ValueError):
    """Detections or ground truth that cannot be evaluated together."""


@dataclass
class EvalReport:
    AP: float | None = None
    AP50: float | None = None
    AP75: float | None = None
    AP_S: float | None = None
    AP_M: float | None = None
    AP_L: float | None = None
    avg_iou: float | None = None
    recall: float | None = None
    precision: float | None = None
    f_measure: float | None = None
    f_at: dict[str, float] = field(default_factory=dict)
    per_class: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def table(self) -> str:
        rows = [("AP", self.AP), ("AP50", self.AP50), ("AP75", self.AP75), ("AP_S", self.AP_S),
                ("AP_M", self.AP_M), ("AP_L", self.AP_L), ("avg IoU (text)", self.avg_iou),
                ("recall (roles)", self.recall), ("precision (roles)", self.precision),
                ("F-measure (roles)", self.f_measure)]
        rows += [(f"F@{k}", v) for k, v in sorted(self.f_at.items())]
        lines = [f"{'metric':<20}{'value':>8}", "-" * 28]
        for name, value in rows:
            lines.append(f"{name:<20}{'-' if value is None else f'{value:.3f}':>8}")
        if self.per_class:
            lines += ["", f"{'category':<16}{'AP':>7}{'AP50':>7}{'#gt':>6}", "-" * 36]
            for name, d in self.per_class.items():
                ap = "-" if d["AP"] is None else f"{d['AP']:.3f}"
                ap50 = "-" if d["AP50"] is None else f"{d['AP50']:.3f}"
                lines.append(f"{name:<16}{ap:>7}{ap50:>7}{d['num_gt']:>6}")
        return "\n".join(lines)


def _boxes(items: Iterable) -> np.ndarray:
    rows = [(b.box if isinstance(b, LabeledBox) else b).as_tuple() for b in items]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def _scores(items: Sequence[LabeledBox]) -> np.ndarray:
    return np.asarray([1.0 if b.score is None else b.score for b in items], dtype=np.float64)


def _check_ids(detections: Detections, gt_ids: Iterable[int]):
    known = set(gt_ids)
    unknown = sorted(set(detections) - known)
    if unknown:
        raise EvalInputError(f"detections reference unknown image ids {unknown[:5]}")


def _areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def _match_image(det_boxes, gt_boxes, gt_ignore, thresholds):
    """COCO greedy matching for one image/class; gts must be sorted ignore-last.

    Returns ``(det_matched [T, D], det_ignored [T, D])``.
    """
    T, D, G = len(thresholds), len(det_boxes), len(gt_boxes)
    matched = np.zeros((T, D), dtype=bool)
    ignored = np.zeros((T, D), dtype=bool)
    if D == 0 or G == 0:
        return matched, ignored
    ious = iou_array(det_boxes, gt_boxes)
    for ti, t in enumerate(thresholds):
        taken = np.zeros(G, dtype=bool)
        for d in range(D):
            best, m = min(t, 1 - 1e-10), -1
            for g in range(G):
                if taken[g]:
                    continue
                if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                    break
                if ious[d, g] < best:
                    continue
                best, m = ious[d, g], g
            if m == -1:
                continue
            taken[m] = True
            matched[ti, d] = True
            ignored[ti, d] = gt_ignore[m]
    return matched, ignored


def _interpolated_ap(scores, matched, ignored, n_gt) -> np.ndarray:
    """101-point interpolated precision per IoU threshold, averaged: ``[T]``."""
    order = np.argsort(-scores, kind="mergesort")
    matched, ignored = matched[:, order], ignored[:, order]
    out = np.zeros(matched.shape[0])
    for ti in range(matched.shape[0]):
        keep = ~ignored[ti]
        tp = np.cumsum(matched[ti][keep])
        fp = np.cumsum(~matched[ti][keep])
        if tp.size == 0:
            out[ti] = 0.0
            continue
        rc = tp / n_gt
        pr = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        idx = np.searchsorted(rc, RECALL_POINTS, side="left")
        q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
        out[ti] = q.mean()
    return out


def coco_ap(detections: Detections, ground_truth: Sequence[ChartAnnotations],
            max_dets: int = MAX_DETS) -> EvalReport:
    _check_ids(detections, (g.id for g in ground_truth))
    results = {}  # (category, area) -> [T] precision or None
    for cat in CATEGORIES:
        for area_name, (lo, hi) in AREA_RANGES.items():
            all_scores, all_matched, all_ignored, n_gt = [], [], [], 0
            for img in ground_truth:
                gts = [b for b in img.boxes if b.category == cat]
                dets = [b for b in detections.get(img.id, ()) if b.category == cat]
                g_boxes = _boxes(gts)
                g_area = _areas(g_boxes)
                g_ignore = (g_area < lo) | (g_area > hi)
                g_order = np.argsort(g_ignore, kind="mergesort")
                g_boxes, g_ignore = g_boxes[g_order], g_ignore[g_order]
                n_gt += int((~g_ignore).sum())
                d_scores = _scores(dets)
                d_order = np.argsort(-d_scores, kind="mergesort")[:max_dets]
                d_boxes, d_scores = _boxes(dets)[d_order], d_scores[d_order]
                matched, ignored = _match_image(d_boxes, g_boxes, g_ignore, IOU_THRESHOLDS)
                d_area = _areas(d_boxes)
                out_of_range = (d_area < lo) | (d_area > hi)
                ignored |= ~matched & out_of_range[None, :]
                all_scores.append(d_scores)
                all_matched.append(matched)
                all_ignored.append(ignored)
            if n_gt == 0:
                results[cat, area_name] = None
                continue
            results[cat, area_name] = _interpolated_ap(
                np.concatenate(all_scores), np.concatenate(all_matched, axis=1),
                np.concatenate(all_ignored, axis=1), n_gt)

    def mean_over(area, ti=None):
        vals = [r if ti is None else r[ti:ti + 1] for (c, a), r in results.items()
                if a == area and r is not None]
        return float(np.mean(np.concatenate(vals))) if vals else None

    report = EvalReport(AP=mean_over("all"), AP50=mean_over("all", 0), AP75=mean_over("all", 5),
                        AP_S=mean_over("small"), AP_M=mean_over("medium"), AP_L=mean_over("large"))
    for cat in CATEGORIES:
        r = results[cat, "all"]
        n = sum(1 for img in ground_truth for b in img.boxes if b.category == cat)
        report.per_class[cat] = {"AP": None if r is None else float(r.mean()),
                                 "AP50": None if r is None else float(r[0]), "num_gt": n}
    return report


def _per_image(items: Mapping[int, Sequence] | Sequence[ChartAnnotations]) -> dict[int, list]:
    if isinstance(items, Mapping):
        return {k: list(v) for k, v in items.items()}
    return {img.id: list(img.boxes) for img in items}


def task2_avg_iou(predictions, ground_truth) -> float:
    """Class-agnostic one-to-one matching by descending IoU, averaged over ground truths."""
    preds, gts = _per_image(predictions), _per_image(ground_truth)
    total_iou, n_gt = 0.0, 0
    for image_id, g in gts.items():
        n_gt += len(g)
        p = preds.get(image_id, [])
        if not g or not p:
            continue
        ious = iou_array(_boxes(p), _boxes(g))
        pi, gi = np.nonzero(ious > 0)
        order = np.argsort(-ious[pi, gi], kind="mergesort")
        used_p, used_g = set(), set()
        for k in order:
            a, b = int(pi[k]), int(gi[k])
            if a in used_p or b in used_g:
                continue
            used_p.add(a)
            used_g.add(b)
            total_iou += float(ious[a, b])
    if n_gt == 0:
        return 1.0 if not any(preds.values()) else 0.0
    return total_iou / n_gt


def _greedy_score_matches(dets: Sequence[LabeledBox], gts: Sequence, threshold: float,
                          same_group=None) -> int:
    """Number of detections matched one-to-one in score order at ``threshold``."""
    if not dets or not gts:
        return 0
    ious = iou_array(_boxes(dets), _boxes(gts))
    taken = np.zeros(len(gts), dtype=bool)
    tp = 0
    for d in np.argsort(-_scores(dets), kind="mergesort"):
        row = ious[d].copy()
        row[taken] = -1.0
        if same_group is not None:
            row[~same_group[d]] = -1.0
        g = int(np.argmax(row))
        if row[g] >= threshold:
            taken[g] = True
            tp += 1
    return tp


def _prf(tp: int, n_det: int, n_gt: int) -> tuple[float, float, float]:
    precision = tp / n_det if n_det else (1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else (1.0 if n_det == 0 else 0.0)
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return recall, precision, f


def task3_prf(detections: Detections, ground_truth, threshold: float = 0.5
              ) -> tuple[float, float, float]:
    """Micro-averaged ``(recall, precision, f_measure)`` over PMC roles."""
    dets_by_img, gts_by_img = _per_image(detections), _per_image(ground_truth)
    tp = n_det = n_gt = 0
    for image_id in set(dets_by_img) | set(gts_by_img):
        dets = [b for b in dets_by_img.get(image_id, []) if to_pmc_role(b.category)]
        gts = [b for b in gts_by_img.get(image_id, []) if to_pmc_role(b.category)]
        n_det += len(dets)
        n_gt += len(gts)
        if dets and gts:
            d_roles = np.array([to_pmc_role(b.category) for b in dets])
            g_roles = np.array([to_pmc_role(b.category) for b in gts])
            tp += _greedy_score_matches(dets, gts, threshold, d_roles[:, None] == g_roles[None, :])
    return _prf(tp, n_det, n_gt)


def bar_fmeasure(detections, ground_truth, thresholds: Sequence[float] = (0.5, 0.7, 0.9),
                 match_category: bool = False) -> dict[float, float]:
    """F-measure per IoU threshold with greedy score-ordered one-to-one matching."""
    dets_by_img, gts_by_img = _per_image(detections), _per_image(ground_truth)
    out = {}
    for t in thresholds:
        tp = n_det = n_gt = 0
        for image_id in set(dets_by_img) | set(gts_by_img):
            dets = dets_by_img.get(image_id, [])
            gts = gts_by_img.get(image_id, [])
            n_det += len(dets)
            n_gt += len(gts)
            group = None
            if match_category and dets and gts:
                group = (np.array([b.category for b in dets])[:, None]
                         == np.array([b.category for b in gts])[None, :])
            tp += _greedy_score_matches(dets, gts, t, group)
        out[t] = _prf(tp, n_det, n_gt)[2]
    return out


def evaluate(detections: Detections, ground_truth: Sequence[ChartAnnotations]) -> EvalReport:
    """Full report: COCO AP suite, text avg IoU, role P/R/F, class-aware F@0.5/0.7/0.9."""
    report = coco_ap(detections, ground_truth)
    text_dets = {k: [b for b in v if b.category in TEXT_CATEGORIES] for k, v in detections.items()}
    text_gts = {g.id: [b for b in g.boxes if b.category in TEXT_CATEGORIES] for g in ground_truth}
    report.avg_iou = task2_avg_iou(text_dets, text_gts)
    report.recall, report.precision, report.f_measure = task3_prf(text_dets, text_gts)
    report.f_at = {f"{t:.1f}": v for t, v in
                   bar_fmeasure(detections, ground_truth, match_category=True).items()}
    return report


# prediction JSON

def predictions_to_records(detections: Detections) -> list[dict]:
    records = []
    for image_id in sorted(detections):
        for b in detections[image_id]:
            records.append({"image_id": image_id, "category_id": CATEGORY_ID[b.category],
                            "bbox": b.box.to_xywh(),
                            "score": 1.0 if b.score is None else float(b.score)})
    return records


def predictions_to_json(detections: Detections) -> bytes:
    return json.dumps(predictions_to_records(detections), indent=1).encode("utf-8")


def predictions_from_json(data: bytes | str) -> dict[int, list[LabeledBox]]:
    doc = load_json_bytes(data, "prediction JSON")
    if isinstance(doc, dict) and "annotations" in doc:
        doc = doc["annotations"]
    if not isinstance(doc, list):
        raise SchemaError("prediction JSON must be a list of records")
    out: dict[int, list[LabeledBox]] = {}
    for i, rec in enumerate(doc):
        where = f"predictions[{i}]"
        if not isinstance(rec, dict):
            raise SchemaError(f"{where}: expected an object")
        image_id = rec.get("image_id")
        if isinstance(image_id, bool) or not isinstance(image_id, int):
            raise SchemaError(f"{where}.image_id: expected an integer")
        score = rec.get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0 <= score <= 1:
            raise SchemaError(f"{where}.score: expected a number in [0, 1], got {score!r}")
        box = parse_bbox(rec.get("bbox"), where)
        category = parse_category_id(rec.get("category_id"), where)
        out.setdefault(image_id, []).append(
            LabeledBox(box, category, id=len(out.get(image_id, [])) + 1, score=float(score)))
    return out
