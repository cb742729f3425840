"""Grounding, detection and captioning metrics."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .alignment import hungarian_match
from .captions import tokenize
from .scene import Box3, box_iou, mask_iou

SCORE_FILTER = 0.3
ACC_THRESHOLDS = (0.25, 0.5)
AP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
CIDER_SIGMA = 6.0
MAX_N = 4


# -- record types ---------------------------------------------------------------

@dataclass(frozen=True)
class GroundingPrediction:
    query_id: str
    boxes: tuple[Box3, ...] = ()
    scores: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if len(self.boxes) != len(self.scores):
            raise ValueError(f"query {self.query_id}: {len(self.boxes)} boxes but {len(self.scores)} scores")
        if not all(math.isfinite(s) for s in self.scores):
            raise ValueError(f"query {self.query_id}: non-finite score")

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "boxes": [b.to_json() for b in self.boxes], "scores": list(self.scores)}

    @classmethod
    def from_json(cls, d: Mapping) -> "GroundingPrediction":
        return cls(str(d["query_id"]), tuple(Box3.from_json(b) for b in d.get("boxes", [])), tuple(d.get("scores", [])))


@dataclass(frozen=True)
class GroundingTruth:
    query_id: str
    boxes: tuple[Box3, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "boxes": [b.to_json() for b in self.boxes]}

    @classmethod
    def from_json(cls, d: Mapping) -> "GroundingTruth":
        return cls(str(d["query_id"]), tuple(Box3.from_json(b) for b in d.get("boxes", [])))


@dataclass(frozen=True)
class DetectionPrediction:
    scene_id: str
    label: str
    mask: frozenset
    score: float

    def __post_init__(self):
        object.__setattr__(self, "mask", frozenset(int(i) for i in self.mask))
        if not math.isfinite(self.score):
            raise ValueError("non-finite detection score")

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "label": self.label, "point_indices": sorted(self.mask), "score": self.score}

    @classmethod
    def from_json(cls, d: Mapping) -> "DetectionPrediction":
        return cls(str(d["scene_id"]), d["label"], frozenset(d["point_indices"]), float(d["score"]))


@dataclass(frozen=True)
class DetectionTruth:
    scene_id: str
    label: str
    mask: frozenset

    def __post_init__(self):
        object.__setattr__(self, "mask", frozenset(int(i) for i in self.mask))

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "label": self.label, "point_indices": sorted(self.mask)}

    @classmethod
    def from_json(cls, d: Mapping) -> "DetectionTruth":
        return cls(str(d["scene_id"]), d["label"], frozenset(d["point_indices"]))


@dataclass(frozen=True)
class CaptionPrediction:
    key: str
    box: Box3 | None
    caption: str

    def to_json(self) -> dict:
        return {"key": self.key, "box": None if self.box is None else self.box.to_json(), "caption": self.caption}

    @classmethod
    def from_json(cls, d: Mapping) -> "CaptionPrediction":
        box = d.get("box")
        return cls(str(d["key"]), None if box is None else Box3.from_json(box), d.get("caption", ""))


@dataclass(frozen=True)
class CaptionTruth:
    key: str
    box: Box3
    references: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(self.references))
        if not self.references:
            raise ValueError(f"object {self.key} has no reference captions")

    def to_json(self) -> dict:
        return {"key": self.key, "box": self.box.to_json(), "references": list(self.references)}

    @classmethod
    def from_json(cls, d: Mapping) -> "CaptionTruth":
        return cls(str(d["key"]), Box3.from_json(d["box"]), tuple(d["references"]))


@dataclass
class MetricReport:
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.metrics.items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"metric {name} = {v} is out of range")
            if not name.startswith("C@") and name != "CIDEr" and v > 1 + 1e-12:
                raise ValueError(f"metric {name} = {v} exceeds 1")

    def __getitem__(self, name: str) -> float:
        return self.metrics[name]

    def merged(self, other: "MetricReport") -> "MetricReport":
        return MetricReport({**self.metrics, **other.metrics}, {**self.counts, **other.counts})

    def to_json(self) -> dict:
        return {"metrics": dict(sorted(self.metrics.items())), "counts": dict(sorted(self.counts.items()))}


def _tag(t: float) -> str:
    return f"{t:g}"


def _by_query(preds: Iterable[GroundingPrediction]) -> dict[str, GroundingPrediction]:
    out = {}
    for p in preds:
        if p.query_id in out:
            raise ValueError(f"duplicate prediction for query {p.query_id}")
        out[p.query_id] = p
    return out


# -- grounding --------------------------------------------------------------------

def grounding_accuracy(
    preds: Iterable[GroundingPrediction],
    gts: Iterable[GroundingTruth],
    thresholds: Sequence[float] = ACC_THRESHOLDS,
) -> MetricReport:
    """Fraction of queries whose top-scoring box reaches each IoU threshold."""
    by_q = _by_query(preds)
    gts = list(gts)
    hits = Counter()
    for gt in gts:
        if len(gt.boxes) != 1:
            raise ValueError(f"query {gt.query_id} needs exactly one ground-truth box, has {len(gt.boxes)}")
        p = by_q.get(gt.query_id)
        if p is None or not p.boxes:
            continue
        best = int(np.argmax(p.scores))
        iou = box_iou(p.boxes[best], gt.boxes[0])
        for t in thresholds:
            if iou >= t:
                hits[t] += 1
    n = len(gts)
    metrics = {f"Acc@{_tag(t)}": (hits[t] / n if n else 0.0) for t in thresholds}
    return MetricReport(metrics, {"queries": n})


def query_f1(pred_boxes: Sequence[Box3], gt_boxes: Sequence[Box3], threshold: float) -> float:
    """F1 of one query after optimal IoU matching; both sides empty scores 1."""
    if not pred_boxes and not gt_boxes:
        return 1.0
    tp = 0
    if pred_boxes and gt_boxes:
        iou = np.array([[box_iou(p, g) for g in gt_boxes] for p in pred_boxes])
        for r, c in hungarian_match(-iou).pairs:
            if iou[r, c] >= threshold:
                tp += 1
    fp = len(pred_boxes) - tp
    fn = len(gt_boxes) - tp
    return 2 * tp / (2 * tp + fp + fn)


def multi_grounding_f1(
    preds: Iterable[GroundingPrediction],
    gts: Iterable[GroundingTruth],
    score_filter: float = SCORE_FILTER,
    thresholds: Sequence[float] = ACC_THRESHOLDS,
) -> MetricReport:
    by_q = _by_query(preds)
    gts = list(gts)
    totals = {t: 0.0 for t in thresholds}
    for gt in gts:
        p = by_q.get(gt.query_id)
        kept = [] if p is None else [b for b, s in zip(p.boxes, p.scores) if s >= score_filter]
        for t in thresholds:
            totals[t] += query_f1(kept, gt.boxes, t)
    n = len(gts)
    metrics = {f"F1@{_tag(t)}": (totals[t] / n if n else 0.0) for t in thresholds}
    return MetricReport(metrics, {"queries": n})


# -- detection ----------------------------------------------------------------------

def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    k = np.arange(1, len(tp_flags) + 1)
    precision = tp / k if len(k) else np.zeros(0)
    recall = tp / n_gt
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _greedy_tp(preds: Sequence[DetectionPrediction], gts: Sequence[DetectionTruth], threshold: float) -> list[bool]:
    order = sorted(range(len(preds)), key=lambda k: -preds[k].score)  # stable on ties
    by_scene: dict[str, list[int]] = defaultdict(list)
    for g, gt in enumerate(gts):
        by_scene[gt.scene_id].append(g)
    taken: set[int] = set()
    flags = []
    for k in order:
        p = preds[k]
        best, best_iou = None, -1.0
        for g in by_scene.get(p.scene_id, ()):
            if g in taken:
                continue
            iou = mask_iou(p.mask, gts[g].mask)
            if iou > best_iou:
                best, best_iou = g, iou
        if best is not None and best_iou >= threshold:
            taken.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def detection_ap(
    preds: Iterable[DetectionPrediction],
    gts: Iterable[DetectionTruth],
    thresholds: Sequence[float] = AP_THRESHOLDS,
    extra_thresholds: Sequence[float] = ACC_THRESHOLDS,
) -> MetricReport:
    """Class-averaged AP; ``AP`` averages over ``thresholds``, plus ``AP@t`` for each extra one."""
    preds, gts = list(preds), list(gts)
    classes = sorted({g.label for g in gts})
    pred_by_class: dict[str, list[DetectionPrediction]] = defaultdict(list)
    for p in preds:
        pred_by_class[p.label].append(p)
    gt_by_class: dict[str, list[DetectionTruth]] = defaultdict(list)
    for g in gts:
        gt_by_class[g.label].append(g)

    def class_mean(t: float) -> float:
        if not classes:
            return 0.0
        aps = [average_precision(_greedy_tp(pred_by_class[c], gt_by_class[c], t), len(gt_by_class[c])) for c in classes]
        return float(np.mean(aps))

    per_t = {t: class_mean(t) for t in sorted(set(thresholds) | set(extra_thresholds))}
    metrics = {"AP": float(np.mean([per_t[t] for t in thresholds]))}
    for t in extra_thresholds:
        metrics[f"AP@{_tag(t)}"] = per_t[t]
    return MetricReport(metrics, {"classes": len(classes), "predictions": len(preds), "instances": len(gts)})


# -- language ------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_refs(references: Sequence) -> list[list[str]]:
    return [[r] if isinstance(r, str) else list(r) for r in references]


def bleu4(candidates: Sequence[str], references: Sequence, tokenizer=tokenize) -> float:
    """Corpus BLEU-4; n-gram precisions for n >= 2 use add-one smoothing."""
    refs = _as_refs(references)
    if len(candidates) != len(refs):
        raise ValueError(f"{len(candidates)} candidates for {len(refs)} reference sets")
    matched = [0] * MAX_N
    total = [0] * MAX_N
    cand_len = ref_len = 0
    for cand, rs in zip(candidates, refs):
        c_tok = tokenizer(cand)
        r_toks = [tokenizer(r) for r in rs]
        cand_len += len(c_tok)
        ref_len += min((abs(len(r) - len(c_tok)), len(r)) for r in r_toks)[1] if r_toks else 0
        for n in range(1, MAX_N + 1):
            c_counts = _ngrams(c_tok, n)
            max_ref: Counter = Counter()
            for r in r_toks:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(v, max_ref[g]) for g, v in c_counts.items())
            total[n - 1] += sum(c_counts.values())
    if cand_len == 0 or matched[0] == 0:
        return 0.0
    log_p = math.log(matched[0] / total[0])
    for n in range(1, MAX_N):
        log_p += math.log((matched[n] + 1) / (total[n] + 1))
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p / MAX_N)


def _cider_vec(counts: Counter, df: Mapping, log_n: float) -> tuple[list[dict], list[float]]:
    vec = [dict() for _ in range(MAX_N)]
    norm = [0.0] * MAX_N
    for gram, tf in counts.items():
        n = len(gram) - 1
        w = tf * (log_n - math.log(max(1.0, df.get(gram, 0.0))))
        vec[n][gram] = w
        norm[n] += w * w
    return vec, [math.sqrt(x) for x in norm]


def cider_scores(candidates: Sequence[str], references: Sequence, tokenizer=tokenize,
                 sigma: float = CIDER_SIGMA) -> list[float]:
    """Per-item CIDEr-D (clipped tf-idf cosine with a gaussian length penalty, x10)."""
    refs = _as_refs(references)
    if len(candidates) != len(refs):
        raise ValueError(f"{len(candidates)} candidates for {len(refs)} reference sets")

    def grams(text: str) -> tuple[Counter, int]:
        toks = tokenizer(text)
        c: Counter = Counter()
        for n in range(1, MAX_N + 1):
            c.update(_ngrams(toks, n))
        return c, len(toks)

    ref_grams = [[grams(r) for r in rs] for rs in refs]
    df: Counter = Counter()
    for rs in ref_grams:
        df.update(set(g for c, _ in rs for g in c))
    log_n = math.log(float(len(refs))) if refs else 0.0

    scores = []
    for cand, rs in zip(candidates, ref_grams):
        c_counts, c_len = grams(cand)
        c_vec, c_norm = _cider_vec(c_counts, df, log_n)
        acc = np.zeros(MAX_N)
        for r_counts, r_len in rs:
            r_vec, r_norm = _cider_vec(r_counts, df, log_n)
            delta = float(c_len - r_len)
            for n in range(MAX_N):
                val = sum(min(w, r_vec[n].get(g, 0.0)) * r_vec[n].get(g, 0.0) for g, w in c_vec[n].items())
                if c_norm[n] != 0 and r_norm[n] != 0:
                    val /= c_norm[n] * r_norm[n]
                acc[n] += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
        score = float(np.mean(acc)) / len(rs) * 10.0 if rs else 0.0
        scores.append(score)
    return scores


def cider(candidates: Sequence[str], references: Sequence, tokenizer=tokenize, sigma: float = CIDER_SIGMA) -> float:
    scores = cider_scores(candidates, references, tokenizer, sigma)
    return float(np.mean(scores)) if scores else 0.0


def iou_gated_caption_metrics(
    preds: Iterable[CaptionPrediction],
    gts: Iterable[CaptionTruth],
    thresholds: Sequence[float] = ACC_THRESHOLDS,
) -> MetricReport:
    """BLEU-4 and CIDEr where a caption only counts if its box reaches the IoU threshold."""
    by_key: dict[str, CaptionPrediction] = {}
    for p in preds:
        if p.key in by_key:
            raise ValueError(f"more than one caption prediction for object {p.key}")
        by_key[p.key] = p
    gts = list(gts)
    refs = [list(g.references) for g in gts]
    metrics = {}
    for t in thresholds:
        cands = []
        for g in gts:
            p = by_key.get(g.key)
            ok = p is not None and p.box is not None and box_iou(p.box, g.box) >= t
            cands.append(p.caption if ok else "")
        metrics[f"B-4@{_tag(t)}"] = bleu4(cands, refs) if gts else 0.0
        metrics[f"C@{_tag(t)}"] = cider(cands, refs) if gts else 0.0
    return MetricReport(metrics, {"objects": len(gts)})
