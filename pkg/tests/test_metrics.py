import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facadeseg import metrics as mx
from facadeseg.labels import EDG, NEG, POS, UNK


def step_gt(h=5, w=12, split=6):
    gt = np.full((h, w), NEG, dtype=np.uint8)
    gt[:, split:] = POS
    return gt


def test_f1_example_rounds_to_074():
    f1 = mx.f1_score(0.89, 0.64)
    assert abs(f1 - 0.7446) < 5e-5 and round(f1, 2) == 0.74
    assert mx.f1_score(0, 0) == 0.0


def test_boundary_pixels_are_pos_next_to_neg():
    b = mx.boundary_pixels(step_gt())
    assert b[:, 6].all() and b.sum() == 5


def test_exclusion_band_examples():
    gt = step_gt()
    ev = mx.exclusion_mask(gt, boundary_px=1)
    assert not ev[:, 5:8].any() and ev[:, :5].all() and ev[:, 8:].all()
    ev2 = mx.exclusion_mask(gt, boundary_px=2)
    assert not ev2[:, 4:9].any() and ev2[:, :4].all()
    assert mx.exclusion_mask(gt, boundary_px=0).all()


def test_exclusion_drops_unknown_and_edges():
    gt = step_gt()
    gt[0, 0] = UNK
    gt[4, 11] = EDG
    ev = mx.exclusion_mask(gt, boundary_px=0)
    assert not ev[0, 0] and not ev[4, 11] and ev.sum() == gt.size - 2
    with_edges = mx.exclusion_mask(gt, boundary_px=0, include_edges=True)
    assert with_edges[4, 11] and not with_edges[0, 0]


def test_edges_count_as_boundary_neighbours():
    gt = np.full((3, 5), POS, dtype=np.uint8)
    gt[:, 0] = EDG
    assert mx.boundary_pixels(gt)[:, 1].all()


def test_negative_band_rejected():
    with pytest.raises(ValueError):
        mx.exclusion_mask(step_gt(), -1)


gt_arrays = st.integers(0, 2**31 - 1).map(
    lambda s: np.random.default_rng(s).choice([NEG, POS, UNK, EDG], size=(10, 10), p=[0.45, 0.45, 0.05, 0.05]).astype(np.uint8)
)


@given(gt_arrays, st.integers(0, 5))
def test_exclusion_monotone_in_band(gt, b):
    small = mx.exclusion_mask(gt, b)
    large = mx.exclusion_mask(gt, b + 1)
    assert not (large & ~small).any()


@given(gt_arrays, st.integers(0, 4))
def test_band_matches_chebyshev_oracle(gt, b):
    ev = mx.exclusion_mask(gt, b)
    seeds = np.argwhere(mx.boundary_pixels(gt))
    for r in range(10):
        for c in range(10):
            near = any(max(abs(r - y), abs(c - x)) <= b for y, x in seeds) if b else False
            want = gt[r, c] in (POS, NEG) and not near
            assert ev[r, c] == want


def test_pixel_metrics_counts():
    gt = np.array([[POS, POS, NEG, NEG, UNK]], dtype=np.uint8)
    pred = np.array([[1, 0, 1, 0, 1]], dtype=bool)
    counts, scores, flags = mx.pixel_metrics(pred, gt, mx.exclusion_mask(gt, 0))
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (1, 1, 1, 1)
    assert scores == {"acc": 0.5, "p": 0.5, "r": 0.5, "f1": 0.5} and flags == []


def test_undefined_scores_flagged():
    gt = np.full((2, 2), NEG, dtype=np.uint8)
    _, scores, flags = mx.pixel_metrics(np.zeros((2, 2), bool), gt, np.ones((2, 2), bool))
    assert scores["p"] == 0 and set(flags) == {"p", "r", "f1"}


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mx.confusion(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2)))


@given(st.integers(0, 2**31 - 1))
def test_pixel_scores_bounded_and_symmetric(seed):
    r = np.random.default_rng(seed)
    a = r.random((8, 8)) < 0.5
    b = r.random((8, 8)) < 0.5
    ev = np.ones((8, 8), bool)
    gt_b = np.where(b, POS, NEG).astype(np.uint8)
    gt_a = np.where(a, POS, NEG).astype(np.uint8)
    _, s1, _ = mx.pixel_metrics(a, gt_b, ev)
    _, s2, _ = mx.pixel_metrics(b, gt_a, ev)
    assert all(0 <= v <= 1 for v in s1.values())
    assert s1["p"] == s2["r"] and s1["r"] == s2["p"] and s1["acc"] == s2["acc"]


def test_opening_removes_thin_structures():
    img = np.zeros((10, 10), bool)
    img[1, 1] = True  # isolated pixel
    img[5:8, 5:8] = True  # 3x3 block survives
    img[0:2, 4:9] = True  # two rows thick, but touching the border
    out = mx.open_3x3(img)
    assert not out[1, 1] and out[5:8, 5:8].all()
    assert not out[0:2].any()


def test_components_boxes_inclusive_raster_order():
    img = np.zeros((6, 8), bool)
    img[0:2, 5:8] = True
    img[3:6, 0:2] = True
    img[4, 2] = True  # diagonal neighbour joins through 8-connectivity
    boxes = mx.components_and_boxes(img)
    assert boxes == [(5, 0, 7, 1), (0, 3, 2, 5)]
    assert mx.components_and_boxes(np.zeros((3, 3), bool)) == []


def test_box_iou_example_below_threshold():
    a, b = (0, 0, 4, 1), (2, 0, 7, 1)
    assert mx.box_iou(a, b) == 6 / 16 == 0.375
    res = mx.match_objects([a], [b])
    assert res.tp == 0 and res.fp == 1 and res.fn == 1


def test_box_iou_validation_and_disjoint():
    assert mx.box_iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0
    assert mx.box_iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1
    with pytest.raises(ValueError):
        mx.box_iou((2, 0, 1, 1), (0, 0, 1, 1))


def _brute_force_weight(pred, gt, thr):
    best = 0.0
    m = len(gt)
    for perm in itertools.permutations(range(m), min(len(pred), m)) if m else [()]:
        # pred i pairs with gt perm[i]; pairs under the threshold count as unmatched
        total = 0.0
        for i, j in enumerate(perm):
            iou = mx.box_iou(pred[i], gt[j])
            if iou > thr:
                total += iou
        best = max(best, total)
    if len(pred) > m:
        # also consider which predictions sit out
        for chosen in itertools.combinations(range(len(pred)), m):
            best = max(best, _brute_force_weight([pred[i] for i in chosen], gt, thr))
    return best


boxes = st.lists(
    st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 5), st.integers(1, 5)).map(
        lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
    ),
    max_size=6,
)


@given(boxes, boxes)
def test_matching_maximises_total_iou(pred, gt):
    pred, gt = pred[:6], gt[:6]
    res = mx.match_objects(pred, gt, 0.5)
    assert res.total_weight == pytest.approx(_brute_force_weight(pred, gt, 0.5), abs=1e-12)
    assert res.tp + res.fp == len(pred) and res.tp + res.fn == len(gt)
    assert all(iou > 0.5 for _, _, iou in res.matched)
    assert len({i for i, _, _ in res.matched}) == res.tp == len({j for _, j, _ in res.matched})
    flipped = mx.match_objects(gt, pred, 0.5)
    assert flipped.tp == res.tp


def test_object_scores():
    scores, flags = mx.ObjectCounts(3, 1, 2).scores()
    assert scores["p_ob"] == 0.75 and scores["r_ob"] == 0.6
    assert scores["f1_ob"] == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    _, flags = mx.ObjectCounts().scores()
    assert flags == ["p_ob", "r_ob", "f1_ob"]


def test_object_counts_use_opened_prediction_and_resolved_gt():
    gt = np.full((20, 20), NEG, dtype=np.uint8)
    gt[2:10, 2:10] = POS
    gt[2, 2:10] = EDG  # edges belong to the object
    pred = np.zeros((20, 20), bool)
    pred[2:10, 2:10] = True
    pred[15, 15] = True  # speck removed by the opening
    c = mx.object_counts(pred, gt)
    assert (c.tp, c.fp, c.fn) == (1, 0, 0)


def test_perfect_prediction_scores_one():
    gt = np.full((30, 30), NEG, dtype=np.uint8)
    gt[5:20, 5:15] = POS
    prob = (gt == POS).astype(np.float32)
    ev = mx.evaluate_class(prob, gt, boundary_px=2)
    row, flags = ev.row()
    assert all(v == 1.0 for v in row.values()) and flags == []


def test_report_serialisation():
    gt = np.full((12, 12), NEG, dtype=np.uint8)
    gt[2:8, 2:8] = POS
    prob = np.zeros((12, 12))
    prob[2:8, 2:6] = 0.9
    evs = [{"window": mx.evaluate_class(prob, gt, 0)}, {"window": mx.evaluate_class(prob, gt, 0)}]
    rep = mx.MetricsReport.build(evs, composite_accuracy=0.5)
    d = rep.to_dict()
    assert d["classes"]["window"]["counts"]["tp"] == 48
    assert d["composite_accuracy"] == 0.5
    lines = rep.to_csv().splitlines()
    assert lines[0] == "class,Acc,P,R,F1,P_ob,R_ob,F1_ob"
    assert lines[1].startswith("window,") and all(len(v.split(".")[1]) == 4 for v in lines[1].split(",")[1:])


def test_composite_accuracy_ignores():
    assert mx.composite_accuracy([[1, 2, 3]], [[1, 0, -1]]) == 0.5
    assert mx.composite_accuracy([[1]], [[-1]]) == 0.0
