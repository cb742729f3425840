import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from grounded3d.metrics import (
    CaptionPrediction,
    CaptionTruth,
    DetectionPrediction,
    DetectionTruth,
    GroundingPrediction,
    GroundingTruth,
    MetricReport,
    average_precision,
    bleu4,
    cider,
    cider_scores,
    detection_ap,
    grounding_accuracy,
    iou_gated_caption_metrics,
    multi_grounding_f1,
    query_f1,
)
from grounded3d.scene import Box3


def box(lo, hi):
    return Box3.from_bounds(lo, hi)


def shifted(s):
    """Unit cube slid by s along x; IoU with the unit cube is (1 - s) / (1 + s)."""
    return box((s, 0, 0), (1 + s, 1, 1))


UNIT = shifted(0.0)


def iou_oracle(a, b):
    alo, ahi, blo, bhi = (v.as_array() for v in (a.min, a.max, b.min, b.max))
    inter = float(np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0, None)))
    va = float(np.prod(ahi - alo))
    vb = float(np.prod(bhi - blo))
    return inter / (va + vb - inter)


def f1_oracle(pred, gt, t):
    """Exhaustive max-total-IoU matching, then count pairs at or above t."""
    if not pred and not gt:
        return 1.0
    best_sum, best_tp = -1.0, 0
    k = min(len(pred), len(gt))
    for rows in itertools.permutations(range(len(pred)), k):
        for cols in itertools.combinations(range(len(gt)), k):
            ious = [iou_oracle(pred[r], gt[c]) for r, c in zip(rows, cols)]
            if sum(ious) > best_sum + 1e-12:
                best_sum, best_tp = sum(ious), sum(i >= t for i in ious)
    return 2 * best_tp / (len(pred) + len(gt))


def ap_oracle(flags, n_gt):
    prec = [sum(flags[:k + 1]) / (k + 1) for k in range(len(flags))]
    return sum(max(prec[k:]) / n_gt for k in range(len(flags)) if flags[k])


def random_box(rng):
    lo = rng.uniform(0, 2, 3)
    return box(lo, lo + rng.uniform(0.3, 1.2, 3))


def test_iou_fixture_values():
    from grounded3d.scene import box_iou
    assert box_iou(UNIT, shifted(1 / 3)) == pytest.approx(0.5)
    assert box_iou(UNIT, shifted(0.6)) == pytest.approx(0.25)


def test_accuracy_uses_top_box():
    gts = [GroundingTruth("a", (UNIT,)), GroundingTruth("b", (UNIT,))]
    preds = [
        GroundingPrediction("a", (shifted(0.9), shifted(0.2)), (0.1, 0.8)),  # top box IoU 0.67
        GroundingPrediction("b", (shifted(0.5), UNIT), (0.9, 0.2)),  # top box IoU 0.33
    ]
    rep = grounding_accuracy(preds, gts)
    assert rep["Acc@0.25"] == 1.0 and rep["Acc@0.5"] == 0.5


def test_accuracy_threshold_is_inclusive_and_missing_counts_as_miss():
    gts = [GroundingTruth("a", (UNIT,)), GroundingTruth("z", (UNIT,))]
    rep = grounding_accuracy([GroundingPrediction("a", (shifted(1 / 3),), (1.0,))], gts)
    assert rep["Acc@0.5"] == 0.5
    with pytest.raises(ValueError):
        grounding_accuracy([], [GroundingTruth("q", (UNIT, UNIT))])


def test_f1_hand_cases():
    assert query_f1([], [], 0.5) == 1.0
    assert query_f1([UNIT], [], 0.5) == 0.0
    assert query_f1([], [UNIT], 0.5) == 0.0
    assert query_f1([UNIT, shifted(5)], [UNIT], 0.5) == pytest.approx(2 / 3)


def test_f1_score_filter():
    gts = [GroundingTruth("q", (UNIT,))]
    low = [GroundingPrediction("q", (UNIT,), (0.29,))]
    edge = [GroundingPrediction("q", (UNIT,), (0.3,))]
    assert multi_grounding_f1(low, gts)["F1@0.5"] == 0.0
    assert multi_grounding_f1(edge, gts)["F1@0.5"] == 1.0


def test_f1_against_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pred = [random_box(rng) for _ in range(int(rng.integers(0, 4)))]
        gt = [random_box(rng) for _ in range(int(rng.integers(0, 4)))]
        for t in (0.25, 0.5):
            assert query_f1(pred, gt, t) == pytest.approx(f1_oracle(pred, gt, t), abs=1e-12)


def test_ap_against_oracle():
    rng = np.random.default_rng(1)
    assert average_precision([], 3) == 0.0
    assert average_precision([True, False, True], 2) == pytest.approx(1 * 0.5 + 2 / 3 * 0.5)
    for _ in range(300):
        flags = list(rng.random(int(rng.integers(0, 10))) < 0.5)
        n_gt = sum(flags) + int(rng.integers(0, 3))
        if n_gt:
            assert average_precision(flags, n_gt) == pytest.approx(ap_oracle(flags, n_gt), abs=1e-12)


def greedy_oracle(preds, gts, t):
    taken, flags = set(), []
    for p in sorted(preds, key=lambda p: -p.score):
        cands = [(len(p.mask & g.mask) / len(p.mask | g.mask), -k) for k, g in enumerate(gts)
                 if k not in taken and g.scene_id == p.scene_id]
        if cands:
            iou, negk = max(cands)
            if iou >= t:
                taken.add(-negk)
                flags.append(True)
                continue
        flags.append(False)
    return flags


def test_detection_ap_micro_scenes():
    rng = np.random.default_rng(2)
    for trial in range(200):
        gts, preds = [], []
        for s in range(2):
            for k in range(int(rng.integers(1, 4))):
                lab = "ab"[int(rng.integers(2))]
                mask = frozenset(range(20 * k, 20 * k + 10))
                gts.append(DetectionTruth(f"s{s}", lab, mask))
                if rng.random() < 0.8:
                    cut = int(rng.integers(0, 8))
                    preds.append(DetectionPrediction(f"s{s}", lab, frozenset(range(20 * k + cut, 20 * k + 10 + cut)),
                                                     float(rng.random())))
            if rng.random() < 0.3:
                preds.append(DetectionPrediction(f"s{s}", "a", frozenset({999}), float(rng.random())))
        rep = detection_ap(preds, gts)
        want = {}
        for t in [0.25] + [round(0.5 + 0.05 * k, 2) for k in range(10)]:
            aps = []
            for lab in sorted({g.label for g in gts}):
                G = [g for g in gts if g.label == lab]
                P = [p for p in preds if p.label == lab]
                aps.append(ap_oracle(greedy_oracle(P, G, t), len(G)))
            want[t] = np.mean(aps)
        assert rep["AP@0.25"] == pytest.approx(want[0.25], abs=1e-12)
        assert rep["AP@0.5"] == pytest.approx(want[0.5], abs=1e-12)
        assert rep["AP"] == pytest.approx(np.mean([want[round(0.5 + 0.05 * k, 2)] for k in range(10)]), abs=1e-12)
        assert rep["AP@0.25"] >= rep["AP@0.5"] - 1e-12


def test_detection_perfect_and_empty():
    gts = [DetectionTruth("s", "a", {1, 2}), DetectionTruth("s", "b", {3})]
    perfect = [DetectionPrediction("s", g.label, g.mask, 0.5) for g in gts]
    assert detection_ap(perfect, gts)["AP"] == 1.0
    assert detection_ap([], gts)["AP"] == 0.0
    assert detection_ap(perfect, [])["AP"] == 0.0


@given(st.lists(st.floats(0, 0.95), min_size=1, max_size=6), st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_grounding_metrics_monotone_in_threshold(shifts, scores):
    n = min(len(shifts), len(scores))
    gts = [GroundingTruth(str(k), (UNIT,)) for k in range(n)]
    preds = [GroundingPrediction(str(k), (shifted(shifts[k]),), (scores[k],)) for k in range(n)]
    acc = grounding_accuracy(preds, gts)
    f1 = multi_grounding_f1(preds, gts)
    assert acc["Acc@0.25"] >= acc["Acc@0.5"]
    assert f1["F1@0.25"] >= f1["F1@0.5"]
    assert 0 <= f1["F1@0.5"] <= 1


def test_bleu_hand_oracle():
    assert bleu4(["the cat sat on the mat"], ["the cat sat on the mat"]) == pytest.approx(1.0)
    want = math.exp(-0.25) * (0.5 * 0.5 * (1 / 3) * 0.5) ** 0.25
    assert bleu4(["the cat the cat"], ["the cat sat on mat"]) == pytest.approx(want)
    assert bleu4([""], ["a b c"]) == 0.0
    assert bleu4(["x y"], ["a b"]) == 0.0
    with pytest.raises(ValueError):
        bleu4(["a"], [])


def test_bleu_picks_closest_reference_length():
    # candidate length 4, references 3 and 6: effective reference length 3, so no brevity penalty
    got = bleu4(["a b c d"], [["a b c", "a b c d e f"]])
    assert got == pytest.approx(((1.0) * (3 / 3) * (2 / 2) * (1 / 1)) ** 0.25)


def test_cider_hand_oracle():
    assert cider(["a b", "c d"], ["a b", "c d"]) == pytest.approx(5.0)
    # one-item corpus: every n-gram appears in every reference set, so idf is zero
    assert cider(["a b"], ["a b"]) == 0.0
    s = cider_scores(["a b", "x y"], ["a b", "c d"])
    assert s[0] == pytest.approx(5.0) and s[1] == 0.0


def test_cider_length_penalty():
    # same n-grams; the candidate is two tokens longer than its reference
    base = cider_scores(["a b", "c d"], ["a b", "c d"])[0]
    longer = cider_scores(["a b a b", "c d"], ["a b", "c d"])[0]
    assert longer < base
    assert cider_scores(["", "c d"], ["a b", "c d"])[0] == 0.0


def test_gated_caption_metrics():
    refs = ["a red chair by the table", "a lamp on the desk", "a bed near the window"]
    gts = [CaptionTruth(str(k), shifted(3 * k), (r,)) for k, r in enumerate(refs)]
    preds = [CaptionPrediction("0", shifted(0.0), refs[0]),
             CaptionPrediction("1", shifted(3 + 0.5), refs[1]),  # IoU 1/3
             CaptionPrediction("2", None, refs[2])]
    rep = iou_gated_caption_metrics(preds, gts)
    at25 = bleu4([refs[0], refs[1], ""], [[r] for r in refs])
    at50 = bleu4([refs[0], "", ""], [[r] for r in refs])
    assert rep["B-4@0.25"] == pytest.approx(at25)
    assert rep["B-4@0.5"] == pytest.approx(at50)
    assert rep["C@0.25"] == pytest.approx(cider([refs[0], refs[1], ""], [[r] for r in refs]))
    assert rep["C@0.25"] >= rep["C@0.5"]
    with pytest.raises(ValueError):
        iou_gated_caption_metrics(preds + preds[:1], gts)


def test_perfect_predictions_score_one():
    boxes = [shifted(2 * k) for k in range(4)]
    gts = [GroundingTruth(str(k), (b,)) for k, b in enumerate(boxes)]
    preds = [GroundingPrediction(str(k), (b,), (0.9,)) for k, b in enumerate(boxes)]
    rep = grounding_accuracy(preds, gts).merged(multi_grounding_f1(preds, gts))
    assert all(v == 1.0 for v in rep.metrics.values())
    caps = ["a red chair by the table", "a lamp on the desk", "a bed near the window", "two books on a shelf"]
    ct = [CaptionTruth(str(k), b, (c,)) for k, (b, c) in enumerate(zip(boxes, caps))]
    cp = [CaptionPrediction(str(k), b, c) for k, (b, c) in enumerate(zip(boxes, caps))]
    crep = iou_gated_caption_metrics(cp, ct)
    assert crep["B-4@0.5"] == pytest.approx(1.0)
    assert crep["C@0.5"] == pytest.approx(10.0)


def test_report_validation_and_records():
    with pytest.raises(ValueError):
        MetricReport({"Acc@0.5": 1.5})
    assert MetricReport({"C@0.5": 3.0})["C@0.5"] == 3.0
    rec = [GroundingPrediction("q", (UNIT,), (0.5,)), DetectionPrediction("s", "a", {3, 1}, 0.2),
           CaptionPrediction("k", None, "x"), CaptionTruth("k", UNIT, ("y",))]
    for r in rec:
        assert type(r).from_json(r.to_json()) == r
    with pytest.raises(ValueError):
        GroundingPrediction("q", (UNIT,), ())
