"""Grounded scene-caption generation: local selection, composition, relation merging,
post-filtering and corpus statistics."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .llm import LLMClient, PromptSpec
from .markup import (
    GroundedCaption,
    MarkupError,
    caption_from_markup,
    parse_grounded_markup,
    serialize_grounded_markup,
)
from .relations import RelationStatement, generate_relations, render_relation_phrase
from .scene import Scene, Vec3

WORD_CAP = 256
SEARCH_RADIUS = 2.0
RADIUS_STEP = 0.1
MAX_LOCAL_OBJECTS = 15
KEEP_PROB_RANGE = (0.6, 0.9)


class CaptionRejected(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class Rejection:
    reason: str  # parse-error | unknown-id | duplicate-span | too-long | empty
    detail: str = ""


@dataclass(frozen=True)
class ObjectCaption:
    object_id: int
    label: str
    phrase: str

    def __post_init__(self):
        if not self.phrase.strip():
            raise ValueError(f"object {self.object_id} has an empty phrase")
        if "[" in self.phrase or "]" in self.phrase:
            raise ValueError(f"object {self.object_id} phrase contains a bracket")


@dataclass(frozen=True)
class LocalSelection:
    scene_id: str
    anchor_id: int
    member_ids: tuple[int, ...]
    radius_used: float

    def __post_init__(self):
        if self.anchor_id not in self.member_ids:
            raise ValueError("selection must contain its anchor")
        if len(self.member_ids) > MAX_LOCAL_OBJECTS:
            raise ValueError(f"selection has {len(self.member_ids)} > {MAX_LOCAL_OBJECTS} members")

    def to_json(self) -> dict:
        return {"anchor": self.anchor_id, "members": list(self.member_ids), "radius": self.radius_used}


def word_count(text: str) -> int:
    return len(text.split())


_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase word-and-punctuation tokens."""
    return _TOKEN.findall(text.lower())


def _rng(seed: int, scene_id: str, anchor_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode("utf-8")), anchor_id])


def _centers(scene: Scene) -> dict[int, np.ndarray]:
    return {i: scene.instance_box(i).center for i in scene.ids}


def select_local_scene(
    scene: Scene,
    anchor_id: int,
    seed: int,
    *,
    radius: float = SEARCH_RADIUS,
    step: float = RADIUS_STEP,
    max_objects: int = MAX_LOCAL_OBJECTS,
    keep_range: tuple[float, float] = KEEP_PROB_RANGE,
) -> LocalSelection:
    """Pick the anchor's neighborhood, then thin it by per-label keep probabilities.

    The radius shrinks by ``step`` while more than ``max_objects`` instances
    (anchor included) have box centers within it.
    """
    scene.instance(anchor_id)
    centers = _centers(scene)
    dist = {i: float(np.linalg.norm(c - centers[anchor_id])) for i, c in centers.items()}
    r = radius
    members = [i for i in scene.ids if dist[i] <= r]
    while len(members) > max_objects:
        nxt = round(r - step, 10)
        if nxt < 0:
            # everything left sits on the anchor center; keep the lowest ids
            members = sorted(members, key=lambda i: (i != anchor_id, dist[i], i))[:max_objects]
            break
        r = nxt
        members = [i for i in scene.ids if dist[i] <= r]
    rng = _rng(seed, scene.scene_id, anchor_id)
    labels = scene.labels()
    keep_p = {lab: float(rng.uniform(*keep_range)) for lab in sorted({labels[i] for i in members})}
    kept = [anchor_id]
    for i in sorted(members):
        if i == anchor_id:
            continue
        if rng.random() < keep_p[labels[i]]:
            kept.append(i)
    return LocalSelection(scene.scene_id, anchor_id, tuple(sorted(kept)), r)


# -- step 1: object phrases ------------------------------------------------------

_COLORS = {
    "black": (30, 30, 30), "white": (235, 235, 235), "gray": (128, 128, 128),
    "red": (200, 40, 40), "green": (50, 160, 60), "blue": (40, 70, 200),
    "yellow": (230, 210, 50), "brown": (120, 80, 40), "beige": (220, 200, 160),
    "orange": (240, 140, 30), "purple": (120, 50, 150),
}


def color_name(rgb: Sequence[float]) -> str:
    rgb = np.asarray(rgb, dtype=float)
    if rgb.max() <= 1.0:
        rgb = rgb * 255.0
    return min(_COLORS, key=lambda k: (float(np.sum((rgb - np.array(_COLORS[k])) ** 2)), k))


def label_template_captions(scene: Scene, ids: Iterable[int] | None = None) -> dict[int, ObjectCaption]:
    """Deterministic phrases from labels, prefixed by a color word when the cloud has colors."""
    out = {}
    for i in (scene.ids if ids is None else ids):
        inst = scene.instance(i)
        label = inst.label.strip()
        phrase = label
        if scene.cloud.colors is not None:
            mean = scene.cloud.colors[sorted(inst.mask)].mean(axis=0)
            phrase = f"{color_name(mean)} {label}"
        out[i] = ObjectCaption(i, label, phrase)
    return out


def condense_object_caption(label: str, description: str, object_id: int, client: LLMClient,
                            spec: PromptSpec | None = None) -> ObjectCaption:
    spec = spec or PromptSpec.builtin("object_phrase")
    text = client.complete(spec, {"label": label, "description": description}, fallback=lambda: label)
    phrase = re.sub(r"[\[\]]", "", text.strip().splitlines()[0] if text.strip() else label).strip(" .")
    phrase = re.sub(r"(\s+\d+)+$", "", phrase) or label
    return ObjectCaption(object_id, label, phrase)


# -- step 2: compose -------------------------------------------------------------

def _fmt_coord(v: Vec3 | Sequence[float]) -> str:
    x, y, z = v.as_tuple() if isinstance(v, Vec3) else v
    return f"({x:.2f}, {y:.2f}, {z:.2f})"


def fallback_compose(selection: LocalSelection, captions: Mapping[int, ObjectCaption]) -> str:
    ordered = [selection.anchor_id] + [i for i in selection.member_ids if i != selection.anchor_id]
    sentences = []
    for k, i in enumerate(ordered):
        tag = f"[{captions[i].phrase} {i}]"
        sentences.append(f"In this area there is {tag}." if k == 0 else f"There is also {tag}.")
    return " ".join(sentences)


def _check_ids(caption: GroundedCaption, allowed: set[int]) -> None:
    unknown = sorted(caption.ids - allowed)
    if unknown:
        raise CaptionRejected("unknown-id", f"ids {unknown} are not in the selection")


def compose_caption(
    selection: LocalSelection,
    captions: Mapping[int, ObjectCaption] | Sequence[ObjectCaption],
    coords: Mapping[int, Vec3 | Sequence[float]],
    client: LLMClient,
    *,
    spec: PromptSpec | None = None,
    word_cap: int = WORD_CAP,
) -> GroundedCaption:
    if not isinstance(captions, Mapping):
        captions = {c.object_id: c for c in captions}
    missing = [i for i in selection.member_ids if i not in captions or i not in coords]
    if missing:
        raise ValueError(f"no caption or coordinate for member ids {missing}")
    spec = spec or PromptSpec.builtin("scene_caption")
    lines = "\n".join(
        f"ID {i}: {captions[i].phrase} (label: {captions[i].label}) at {_fmt_coord(coords[i])}"
        for i in selection.member_ids
    )
    raw = client.complete(spec, {"objects": lines}, fallback=lambda: fallback_compose(selection, captions))
    try:
        caption = caption_from_markup(selection.scene_id, raw.strip(), {"selection": selection.to_json()})
    except MarkupError as exc:
        raise CaptionRejected("parse-error", str(exc)) from exc
    _check_ids(caption, set(selection.member_ids))
    seen: set[int] = set()
    for c in caption.correspondences:
        dup = seen & set(c.ids)
        if dup:
            raise CaptionRejected("repeated-id", f"ids {sorted(dup)} referenced more than once")
        seen |= set(c.ids)
    if word_count(caption.text) >= word_cap:
        raise CaptionRejected("too-long", f"{word_count(caption.text)} words")
    return caption


# -- step 3: relations -------------------------------------------------------------

def _sentence(markup: str) -> str:
    return markup[0].upper() + markup[1:] + "."


def _append_sentence(caption: GroundedCaption, markup: str) -> GroundedCaption:
    text, corrs = parse_grounded_markup(markup)
    sep = "" if not caption.text or caption.text.endswith((" ", "\n")) else " "
    offset = len(caption.text) + len(sep)
    return GroundedCaption(
        caption.scene_id,
        caption.text + sep + text,
        caption.correspondences + tuple(c.shifted(offset) for c in corrs),
        caption.provenance,
    )


def _with_relations(caption: GroundedCaption, statements: Sequence[RelationStatement]) -> GroundedCaption:
    prov = dict(caption.provenance)
    prov["relations"] = list(prov.get("relations", [])) + [s.to_json() for s in statements]
    return GroundedCaption(caption.scene_id, caption.text, caption.correspondences, prov)


def _corr_multiset(caption: GroundedCaption) -> list[tuple[str, tuple[int, ...]]]:
    return sorted((c.phrase(caption.text), c.ids) for c in caption.correspondences)


def inject_relations(
    caption: GroundedCaption,
    statements: Sequence[RelationStatement],
    labels: Mapping[int, str],
    client: LLMClient,
    *,
    spec: PromptSpec | None = None,
    word_cap: int = WORD_CAP,
) -> GroundedCaption:
    """Merge relation statements into a caption.

    The fallback appends one sentence per statement, skipping any that would
    push the caption to the word cap. LLM output must keep every existing
    (phrase, ids) correspondence and cite only known ids.
    """
    if not statements:
        return caption
    rendered = [render_relation_phrase(s, labels) for s in statements]

    def fallback() -> str:
        merged = caption
        for markup in rendered:
            candidate = _append_sentence(merged, _sentence(markup))
            if word_count(candidate.text) < word_cap:
                merged = candidate
        return serialize_grounded_markup(merged)

    spec = spec or PromptSpec.builtin("insert_relations")
    raw = client.complete(
        spec,
        {"caption": serialize_grounded_markup(caption), "relations": "\n".join(_sentence(r) for r in rendered)},
        fallback=fallback,
    )
    try:
        text, corrs = parse_grounded_markup(raw.strip())
        merged = GroundedCaption(caption.scene_id, text, tuple(corrs), caption.provenance)
    except (MarkupError, ValueError) as exc:
        raise CaptionRejected("parse-error", str(exc)) from exc
    allowed = caption.ids | {i for s in statements for i in s.ids}
    _check_ids(merged, allowed)
    old, new = _corr_multiset(caption), _corr_multiset(merged)
    remaining = list(new)
    for item in old:
        if item not in remaining:
            raise CaptionRejected("lost-correspondence", f"{item[0]!r} -> {list(item[1])} dropped")
        remaining.remove(item)
    if word_count(merged.text) >= word_cap:
        raise CaptionRejected("too-long", f"{word_count(merged.text)} words")
    return _with_relations(merged, statements)


# -- post-processing ---------------------------------------------------------------

def validate_caption(
    candidate: str | GroundedCaption,
    scene: Scene,
    *,
    word_cap: int = WORD_CAP,
    provenance: dict | None = None,
) -> GroundedCaption | Rejection:
    """Accept a caption or say why it is filtered out. Raw strings are parsed as markup."""
    if isinstance(candidate, str):
        try:
            text, corrs = parse_grounded_markup(candidate)
        except MarkupError as exc:
            return Rejection("parse-error", str(exc))
        spans = [c.span for c in corrs]
        scene_id, prov = scene.scene_id, dict(provenance or {})
    else:
        text, corrs = candidate.text, list(candidate.correspondences)
        spans = [c.span for c in corrs]
        scene_id, prov = candidate.scene_id, candidate.provenance
    if len(set(spans)) != len(spans):
        return Rejection("duplicate-span")
    if not text.strip():
        return Rejection("empty")
    unknown = sorted({i for c in corrs for i in c.ids} - set(scene.ids))
    if unknown:
        return Rejection("unknown-id", f"ids {unknown} not in scene {scene.scene_id}")
    if word_count(text) >= word_cap:
        return Rejection("too-long", f"{word_count(text)} words")
    try:
        return GroundedCaption(scene_id, text, tuple(corrs), prov)
    except ValueError as exc:
        return Rejection("duplicate-span", str(exc))


# -- statistics --------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    texts: int
    tokens: int
    correspondences: int

    @property
    def tokens_per_text(self) -> Fraction:
        return Fraction(self.tokens, self.texts) if self.texts else Fraction(0)

    @property
    def corr_per_token(self) -> Fraction:
        return Fraction(self.correspondences, self.tokens) if self.tokens else Fraction(0)

    def to_json(self) -> dict:
        return {
            "texts": self.texts,
            "tokens": self.tokens,
            "correspondences": self.correspondences,
            "tokens_per_text": float(self.tokens_per_text),
            "corr_per_token": float(self.corr_per_token),
            "corr_per_token_percent": round(float(self.corr_per_token) * 100, 4),
        }


def corpus_stats(
    corpus: Iterable[GroundedCaption],
    tokenizer: Callable[[str], list[str]] = tokenize,
) -> CorpusStats:
    texts = tokens = corrs = 0
    for cap in corpus:
        texts += 1
        tokens += len(tokenizer(cap.text))
        corrs += len(cap.correspondences)
    return CorpusStats(texts, tokens, corrs)


# -- whole pipeline ------------------------------------------------------------------

@dataclass
class PipelineResult:
    accepted: list[GroundedCaption] = field(default_factory=list)
    rejected: list[tuple[int, Rejection]] = field(default_factory=list)


def generate_scene_captions(
    scene: Scene,
    client: LLMClient,
    seed: int,
    *,
    object_captions: Mapping[int, ObjectCaption] | None = None,
    anchors: Iterable[int] | None = None,
    radius: float = SEARCH_RADIUS,
    max_objects: int = MAX_LOCAL_OBJECTS,
    keep_range: tuple[float, float] = KEEP_PROB_RANGE,
    word_cap: int = WORD_CAP,
    max_relations: int = 3,
    compose_spec: PromptSpec | None = None,
    relation_spec: PromptSpec | None = None,
) -> PipelineResult:
    """Steps 1-3 for every anchor of one scene. Rejected anchors are reported, not raised."""

    object_captions = dict(object_captions or label_template_captions(scene))
    for i in scene.ids:
        object_captions.setdefault(i, label_template_captions(scene, [i])[i])
    coords = {i: tuple(scene.instance_box(i).center) for i in scene.ids}
    labels = scene.labels()
    result = PipelineResult()
    for anchor in (scene.ids if anchors is None else anchors):
        sel = select_local_scene(scene, anchor, seed, radius=radius, max_objects=max_objects, keep_range=keep_range)
        try:
            cap = compose_caption(sel, object_captions, coords, client, spec=compose_spec, word_cap=word_cap)
            rel_seed = int(_rng(seed, scene.scene_id, anchor).integers(2**31))
            stmts = generate_relations(scene, sel.member_ids, rel_seed, max_relations)
            cap = inject_relations(cap, stmts, labels, client, spec=relation_spec, word_cap=word_cap)
        except CaptionRejected as exc:
            result.rejected.append((anchor, Rejection(exc.reason, exc.detail)))
            continue
        checked = validate_caption(cap, scene, word_cap=word_cap)
        if isinstance(checked, Rejection):
            result.rejected.append((anchor, checked))
        else:
            result.accepted.append(checked)
    return result
