"""Pixel and object evaluation of per-class predictions.

Pixel scores count over evaluated pixels only: ground-truth UNK and EDG
pixels are skipped, as is a band around every POS/NEG transition. Object
scores compare bounding boxes of connected components, matched one-to-one
by maximum total IoU among pairs above a threshold.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from . import kernels
from .labels import EDG, NEG, POS, UNK

_SQUARE = np.ones((3, 3), dtype=bool)


def _ratio(num, den):
    """num / den, or (0.0, True) when the denominator vanishes."""
    if den == 0:
        return 0.0, True
    return num / den, False


def f1_score(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------

def resolve_edges(gt):
    """Replace EDG pixels by the label of the nearest non-EDG, non-UNK pixel."""
    gt = np.asarray(gt)
    edg = gt == EDG
    if not edg.any():
        return gt.copy()
    clear = ~edg & (gt != UNK)
    out = gt.copy()
    if not clear.any():
        out[edg] = UNK
        return out
    _, (iy, ix) = ndimage.distance_transform_edt(~clear, return_indices=True)
    out[edg] = gt[iy[edg], ix[edg]]
    return out


def boundary_pixels(gt):
    """POS pixels 8-adjacent to a NEG or EDG pixel."""
    pos = gt == POS
    other = (gt == NEG) | (gt == EDG)
    near_other = ndimage.binary_dilation(other, structure=_SQUARE)
    return pos & near_other


def exclusion_mask(gt, boundary_px=5, include_edges=False):
    """Boolean mask of the pixels that are evaluated for one class layer.

    Drops UNK pixels, EDG pixels (unless ``include_edges``, which first
    resolves them to the nearest labelled value), and every pixel within
    Chebyshev distance ``boundary_px`` of a POS/NEG transition. A zero
    ``boundary_px`` disables the band.
    """
    if boundary_px < 0:
        raise ValueError("boundary_px must be >= 0")
    gt = np.asarray(gt)
    if include_edges:
        gt = resolve_edges(gt)
    keep = (gt == POS) | (gt == NEG)
    if boundary_px > 0:
        seeds = boundary_pixels(gt)
        if seeds.any():
            size = 2 * boundary_px + 1
            band = ndimage.maximum_filter(seeds, size=size, mode="constant", cval=False)
            keep &= ~band
    return keep


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def scores(self):
        """Acc, P, R, F1 plus the names of any that were undefined (reported as 0)."""
        flags = []
        acc, bad = _ratio(self.tp + self.tn, self.total)
        if bad:
            flags.append("acc")
        p, bad = _ratio(self.tp, self.tp + self.fp)
        if bad:
            flags.append("p")
        r, bad = _ratio(self.tp, self.tp + self.fn)
        if bad:
            flags.append("r")
        f1 = f1_score(p, r)
        if p + r == 0:
            flags.append("f1")
        return {"acc": acc, "p": p, "r": r, "f1": f1}, flags


def confusion(pred, gt, evaluated):
    """Binary counts of ``pred`` (bool) against gt POS over ``evaluated`` pixels."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt)
    evaluated = np.asarray(evaluated, dtype=bool)
    if pred.shape != gt.shape or gt.shape != evaluated.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {evaluated.shape}")
    truth = gt == POS
    return ConfusionCounts(
        tp=int((pred & truth & evaluated).sum()),
        fp=int((pred & ~truth & evaluated).sum()),
        fn=int((~pred & truth & evaluated).sum()),
        tn=int((~pred & ~truth & evaluated).sum()),
    )


def pixel_metrics(pred, gt, evaluated):
    counts = confusion(pred, gt, evaluated)
    scores, flags = counts.scores()
    return counts, scores, flags


# ---------------------------------------------------------------------------
# objects
# ---------------------------------------------------------------------------

def open_3x3(binary):
    """Erosion then dilation with a full 3x3 square; outside the image is False."""
    b = np.asarray(binary, dtype=bool)
    eroded = ndimage.binary_erosion(b, structure=_SQUARE, border_value=0)
    return ndimage.binary_dilation(eroded, structure=_SQUARE, border_value=0)


def components_and_boxes(binary):
    """Inclusive (x0, y0, x1, y1) boxes of the 8-connected components, in raster order."""
    labels, n = kernels.label_components(binary)
    if n == 0:
        return []
    slices = ndimage.find_objects(labels, max_label=n)
    return [(s[1].start, s[0].start, s[1].stop - 1, s[0].stop - 1) for s in slices]


def box_area(b):
    return (b[2] - b[0] + 1) * (b[3] - b[1] + 1)


def box_iou(a, b):
    """IoU of two inclusive integer boxes by pixel count."""
    for box in (a, b):
        if box[0] > box[2] or box[1] > box[3]:
            raise ValueError(f"invalid box {box}")
    iw = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ih = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(iw, 0) * max(ih, 0)
    return inter / (box_area(a) + box_area(b) - inter)


@dataclass
class ObjectMatchResult:
    matched: list = field(default_factory=list)  # (pred index, gt index, iou)
    unmatched_pred: list = field(default_factory=list)
    unmatched_gt: list = field(default_factory=list)

    @property
    def tp(self):
        return len(self.matched)

    @property
    def fp(self):
        return len(self.unmatched_pred)

    @property
    def fn(self):
        return len(self.unmatched_gt)

    @property
    def total_weight(self):
        return float(sum(m[2] for m in self.matched))


def match_objects(pred_boxes, gt_boxes, iou_threshold=0.5):
    """Maximum-total-IoU one-to-one matching over pairs with IoU > threshold."""
    n, m = len(pred_boxes), len(gt_boxes)
    weights = np.zeros((n, m))
    for i, a in enumerate(pred_boxes):
        for j, b in enumerate(gt_boxes):
            iou = box_iou(a, b)
            if iou > iou_threshold:
                weights[i, j] = iou
    matched = []
    if n and m and weights.any():
        rows, cols = linear_sum_assignment(weights, maximize=True)
        matched = [(int(i), int(j), float(weights[i, j])) for i, j in zip(rows, cols) if weights[i, j] > 0]
    used_p = {i for i, _, _ in matched}
    used_g = {j for _, j, _ in matched}
    return ObjectMatchResult(
        matched,
        [i for i in range(n) if i not in used_p],
        [j for j in range(m) if j not in used_g],
    )


@dataclass
class ObjectCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ObjectCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def scores(self):
        flags = []
        p, bad = _ratio(self.tp, self.tp + self.fp)
        if bad:
            flags.append("p_ob")
        r, bad = _ratio(self.tp, self.tp + self.fn)
        if bad:
            flags.append("r_ob")
        f1 = f1_score(p, r)
        if p + r == 0:
            flags.append("f1_ob")
        return {"p_ob": p, "r_ob": r, "f1_ob": f1}, flags


def object_metrics(result):
    return ObjectCounts(result.tp, result.fp, result.fn).scores()


def object_counts(pred, gt, iou_threshold=0.5):
    """Match opened prediction components against ground-truth objects."""
    pred_boxes = components_and_boxes(open_3x3(pred))
    gt_boxes = components_and_boxes(resolve_edges(gt) == POS)
    res = match_objects(pred_boxes, gt_boxes, iou_threshold)
    return ObjectCounts(res.tp, res.fp, res.fn)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

COLUMNS = ("acc", "p", "r", "f1", "p_ob", "r_ob", "f1_ob")
CSV_HEADER = ("class", "Acc", "P", "R", "F1", "P_ob", "R_ob", "F1_ob")


@dataclass
class ClassEvaluation:
    pixels: ConfusionCounts = field(default_factory=ConfusionCounts)
    objects: ObjectCounts = field(default_factory=ObjectCounts)

    def __add__(self, other):
        return ClassEvaluation(self.pixels + other.pixels, self.objects + other.objects)

    def row(self):
        px, f1 = self.pixels.scores()
        ob, f2 = self.objects.scores()
        return {**px, **ob}, f1 + f2


def evaluate_class(pos_prob, gt, boundary_px=5, include_edges=False, iou_threshold=0.5):
    """Pixel and object counts for one class of one image."""
    pred = np.asarray(pos_prob) > 0.5
    gt = np.asarray(gt)
    ev = exclusion_mask(gt, boundary_px, include_edges)
    target = resolve_edges(gt) if include_edges else gt
    return ClassEvaluation(confusion(pred, target, ev), object_counts(pred, gt, iou_threshold))


@dataclass
class MetricsReport:
    classes: tuple
    per_class: dict  # name -> ClassEvaluation
    composite_accuracy: float | None = None

    @classmethod
    def build(cls, evaluations, composite_accuracy=None):
        """Fold per-image {class: ClassEvaluation} dicts into one report."""
        evaluations = list(evaluations)
        classes = tuple(evaluations[0]) if evaluations else ()
        total = {c: ClassEvaluation() for c in classes}
        for ev in evaluations:
            for c in classes:
                total[c] = total[c] + ev[c]
        return cls(classes, total, composite_accuracy)

    def scores(self, name):
        return self.per_class[name].row()[0]

    def to_dict(self):
        out = {"classes": {}}
        for c in self.classes:
            ev = self.per_class[c]
            vals, flags = ev.row()
            out["classes"][c] = {
                **{k: round(float(v), 12) for k, v in vals.items()},
                "undefined": flags,
                "counts": {
                    "tp": ev.pixels.tp, "fp": ev.pixels.fp, "fn": ev.pixels.fn, "tn": ev.pixels.tn,
                    "tp_ob": ev.objects.tp, "fp_ob": ev.objects.fp, "fn_ob": ev.objects.fn,
                },
            }
        if self.composite_accuracy is not None:
            out["composite_accuracy"] = round(float(self.composite_accuracy), 12)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for c in self.classes:
            vals, _ = self.per_class[c].row()
            writer.writerow([c] + [f"{vals[k]:.4f}" for k in COLUMNS])
        return buf.getvalue()


def composite_accuracy(pred_labels, gt_labels, ignore=-1):
    """Share of non-ignored pixels whose single label is right."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    valid = gt_labels != ignore
    n = int(valid.sum())
    if n == 0:
        return 0.0
    return float((pred_labels[valid] == gt_labels[valid]).sum()) / n
