"""Self-checks behind the ``check`` command: small oracle runs of the numeric
core plus invariant checks over whatever corpus files are supplied."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import alignment as al
from .captions import Rejection, validate_caption
from .instructions import InstructionSample, sample_violations
from .markup import GroundedCaption, parse_grounded_markup, serialize_grounded_markup
from .metrics import (
    CaptionPrediction,
    CaptionTruth,
    DetectionPrediction,
    DetectionTruth,
    GroundingPrediction,
    GroundingTruth,
    detection_ap,
    grounding_accuracy,
    iou_gated_caption_metrics,
    multi_grounding_f1,
)
from .scene import Box3, Scene


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def perfect_fit(rng: np.random.Generator, n_points: int = 40, n_inst: int = 3, n_queries: int = 6,
                n_phrases: int = 2, logit: float = 20.0):
    """A configuration whose queries reproduce the ground truth with saturated logits.

    Returns ``(S_mask, S_text, gt, targets)``; ``targets`` is (phrases, instances).
    """
    owner = rng.integers(0, n_inst, size=n_points)
    owner[:n_inst] = np.arange(n_inst)  # every instance owns at least one point
    gt = np.zeros((n_points, n_inst))
    gt[np.arange(n_points), owner] = 1.0
    queries = rng.permutation(n_queries)[:n_inst]
    S_mask = np.full((n_points, n_queries), -logit)
    for inst, q in enumerate(queries):
        S_mask[:, q] = np.where(gt[:, inst] > 0, logit, -logit)
    phrase_inst = rng.integers(0, 2, size=(n_phrases, n_inst)).astype(float)
    S_text = np.full((n_phrases, n_queries), -logit)
    for inst, q in enumerate(queries):
        S_text[:, q] = np.where(phrase_inst[:, inst] > 0, logit, -logit)
    targets = al.CorrespondenceTargets("T_text", phrase_inst, np.zeros_like(phrase_inst, dtype=bool))
    return S_mask, S_text, gt, targets


def _check_matching(rng: np.random.Generator, trials: int = 60) -> CheckResult:
    for _ in range(trials):
        n, m = (int(v) for v in rng.integers(1, 6, size=2))
        C = rng.random((n, m))
        got = al.hungarian_match(C).cost
        k = min(n, m)
        best = min(
            sum(C[r, c] for r, c in zip(rows, cols))
            for rows in itertools.combinations(range(n), k)
            for cols in itertools.permutations(range(m), k)
        )
        if abs(got - best) > 1e-12:
            return CheckResult("matching optimality", False, f"{n}x{m}: {got} vs {best}")
    return CheckResult("matching optimality", True, f"{trials} matrices")


def _check_gradients(rng: np.random.Generator, trials: int = 6, tol: float = 1e-4) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(0, 2, size=(3, 5))
        t = (rng.random((3, 5)) < 0.4).astype(float)
        worst = max(worst, al.grad_check(lambda z: al.sigmoid_focal_loss_with_grad(z, t), [x]))
        worst = max(worst, al.grad_check(lambda z: al.dice_loss_with_grad(z, t), [x]))
    return CheckResult("focal/dice gradients", worst < tol, f"max relative error {worst:.2e}")


def _check_clasp(rng: np.random.Generator) -> CheckResult:
    S_mask, S_text, gt, targets = perfect_fit(rng)
    value = al.clasp_loss(S_mask, S_text, gt, targets).total
    perm = rng.permutation(S_mask.shape[1])
    permuted = al.clasp_loss(S_mask[:, perm], S_text[:, perm], gt, targets).total
    ok = value < 1e-4 and abs(value - permuted) <= 1e-12
    return CheckResult("clasp perfect fit", ok, f"loss {value:.2e}, permutation gap {abs(value - permuted):.1e}")


def _check_referent_rule() -> CheckResult:
    gt = range(100)
    Q = np.zeros((100, 3), dtype=bool)
    for col, k in enumerate((29, 30, 31)):
        Q[:k, col] = True
    labels = al.referent_positive_targets(Q, gt)
    ok = labels == ["ignored", "ignored", "positive"]
    return CheckResult("referent IoU rule", ok, "/".join(labels))


def _check_perfect_metrics() -> CheckResult:
    boxes = [Box3.from_bounds((i, 0, 0), (i + 0.5, 1, 1)) for i in range(3)]
    gts = [GroundingTruth(f"q{i}", (b,)) for i, b in enumerate(boxes)]
    preds = [GroundingPrediction(f"q{i}", (b,), (0.9,)) for i, b in enumerate(boxes)]
    rep = grounding_accuracy(preds, gts).merged(multi_grounding_f1(preds, gts))
    dets = [DetectionTruth("s", lab, frozenset(range(5 * k, 5 * k + 5))) for k, lab in enumerate("aab")]
    rep = rep.merged(detection_ap([DetectionPrediction(d.scene_id, d.label, d.mask, 1.0) for d in dets], dets))
    caps = ["a red chair next to the table", "a small lamp on the desk", "the bed by the window"]
    ct = [CaptionTruth(str(k), boxes[k], (c,)) for k, c in enumerate(caps)]
    cp = [CaptionPrediction(str(k), boxes[k], c) for k, c in enumerate(caps)]
    rep = rep.merged(iou_gated_caption_metrics(cp, ct))
    bad = {k: v for k, v in rep.metrics.items() if not k.startswith("C@") and v != 1.0}
    return CheckResult("perfect-prediction metrics", not bad, ", ".join(f"{k}={v}" for k, v in bad.items()))


def builtin_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        _check_matching(rng),
        _check_gradients(rng),
        _check_clasp(rng),
        _check_referent_rule(),
        _check_perfect_metrics(),
    ]


def corpus_checks(
    scenes: Sequence[Scene] = (),
    captions: Iterable[GroundedCaption] = (),
    samples: Iterable[InstructionSample] = (),
) -> list[CheckResult]:
    by_id = {s.scene_id: s for s in scenes}
    results = []
    caption_problems, n_caps = [], 0
    for cap in captions:
        n_caps += 1
        text, corrs = parse_grounded_markup(serialize_grounded_markup(cap))
        if text != cap.text or tuple(corrs) != cap.correspondences:
            caption_problems.append(f"{cap.scene_id}: markup round trip changed the caption")
        scene = by_id.get(cap.scene_id)
        if scene is not None:
            checked = validate_caption(cap, scene, provenance=cap.provenance)
            if isinstance(checked, Rejection):
                caption_problems.append(f"{cap.scene_id}: {checked.reason} ({checked.detail})")
    if n_caps:
        results.append(CheckResult("caption invariants", not caption_problems,
                                   f"{n_caps} captions" + (f"; {caption_problems[0]}" if caption_problems else "")))
    sample_problems, n_samples = [], 0
    for s in samples:
        n_samples += 1
        sample_problems += [f"{s.scene_id}/{s.task.value}: {p}" for p in sample_violations(s)]
        scene = by_id.get(s.scene_id)
        if scene is not None:
            unknown = s.ids - set(scene.ids)
            if unknown:
                sample_problems.append(f"{s.scene_id}/{s.task.value}: unknown ids {sorted(unknown)}")
    if n_samples:
        results.append(CheckResult("instruction invariants", not sample_problems,
                                   f"{n_samples} samples" + (f"; {sample_problems[0]}" if sample_problems else "")))
    return results
