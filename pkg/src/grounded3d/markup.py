"""Grounded captions and the ``[phrase id ...]`` inline markup.

Inside a bracket the id list is the maximal trailing run of
whitespace-separated non-negative integers; everything before it (stripped)
is the phrase. ``the [white nightstand 12] here`` parses to the plain text
``the white nightstand here`` with one correspondence over
``white nightstand`` -> ``[12]``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

_INT = re.compile(r"\d+")
_ID_RUN = re.compile(r"(?:(?:^|\s)\d+)+\s*$")


class MarkupError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class PhraseCorrespondence:
    start: int
    end: int
    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad span [{self.start}, {self.end})")
        if not self.ids:
            raise ValueError("a correspondence needs at least one id")

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def phrase(self, text: str) -> str:
        return text[self.start:self.end]

    def shifted(self, delta: int) -> "PhraseCorrespondence":
        return PhraseCorrespondence(self.start + delta, self.end + delta, self.ids)


@dataclass(frozen=True)
class GroundedCaption:
    scene_id: str
    text: str
    correspondences: tuple[PhraseCorrespondence, ...] = ()
    provenance: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        corrs = tuple(sorted(self.correspondences, key=lambda c: (c.start, c.end)))
        object.__setattr__(self, "correspondences", corrs)
        prev_end = 0
        for c in corrs:
            if c.end > len(self.text):
                raise ValueError(f"span {c.span} runs past text of length {len(self.text)}")
            if c.start < prev_end:
                raise ValueError(f"span {c.span} overlaps the previous correspondence")
            prev_end = c.end

    @property
    def ids(self) -> set[int]:
        return {i for c in self.correspondences for i in c.ids}

    def phrases(self) -> list[str]:
        return [c.phrase(self.text) for c in self.correspondences]

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "text": self.text,
            "correspondences": [
                {"span": [c.start, c.end], "ids": list(c.ids)} for c in self.correspondences
            ],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GroundedCaption":
        return cls(
            scene_id=str(data["scene_id"]),
            text=data["text"],
            correspondences=tuple(
                PhraseCorrespondence(c["span"][0], c["span"][1], tuple(c["ids"]))
                for c in data.get("correspondences", [])
            ),
            provenance=dict(data.get("provenance") or {}),
        )


def parse_grounded_markup(raw: str) -> tuple[str, list[PhraseCorrespondence]]:
    out: list[str] = []
    corrs: list[PhraseCorrespondence] = []
    pos = 0  # length of the plain text emitted so far
    i = 0
    n = len(raw)
    while i < n:
        ch = raw[i]
        if ch == "]":
            raise MarkupError("unmatched ']'", i)
        if ch != "[":
            j = i
            while j < n and raw[j] not in "[]":
                j += 1
            out.append(raw[i:j])
            pos += j - i
            i = j
            continue
        close = i + 1
        while close < n and raw[close] not in "[]":
            close += 1
        if close >= n:
            raise MarkupError("unclosed '['", i)
        if raw[close] == "[":
            raise MarkupError("nested '['", close)
        body = raw[i + 1:close]
        m = _ID_RUN.search(body)  # leftmost match = maximal trailing run
        if m is None:
            raise MarkupError("bracket has no trailing object ids", i)
        phrase = body[:m.start()].strip()
        ids = [int(t) for t in m.group(0).split()]
        if not phrase:
            raise MarkupError("bracket has ids but no phrase", i)
        corrs.append(PhraseCorrespondence(pos, pos + len(phrase), tuple(ids)))
        out.append(phrase)
        pos += len(phrase)
        i = close + 1
    return "".join(out), corrs


def _check_phrase(phrase: str) -> None:
    if "[" in phrase or "]" in phrase:
        raise ValueError(f"phrase {phrase!r} contains a bracket")
    if phrase != phrase.strip() or not phrase:
        raise ValueError(f"phrase {phrase!r} has surrounding whitespace or is empty")
    if _INT.fullmatch(phrase.split()[-1]):
        raise ValueError(f"phrase {phrase!r} ends in an integer and would be read as an id")


def serialize_grounded_markup(caption: GroundedCaption) -> str:
    return markup_from_parts(caption.text, caption.correspondences)


def markup_from_parts(text: str, correspondences: Sequence[PhraseCorrespondence]) -> str:
    pieces: list[str] = []
    cursor = 0
    for c in sorted(correspondences, key=lambda c: c.start):
        plain = text[cursor:c.start]
        if "[" in plain or "]" in plain:
            raise ValueError("plain text contains a bracket")
        phrase = c.phrase(text)
        _check_phrase(phrase)
        pieces.append(plain)
        pieces.append("[" + phrase + " " + " ".join(str(i) for i in c.ids) + "]")
        cursor = c.end
    tail = text[cursor:]
    if "[" in tail or "]" in tail:
        raise ValueError("plain text contains a bracket")
    pieces.append(tail)
    return "".join(pieces)


def caption_from_markup(scene_id: str, raw: str, provenance: dict | None = None) -> GroundedCaption:
    text, corrs = parse_grounded_markup(raw)
    return GroundedCaption(scene_id, text, tuple(corrs), dict(provenance or {}))


# -- JSONL ----------------------------------------------------------------------

def dumps_jsonl(records: Iterable[Any]) -> str:
    lines = []
    for r in records:
        payload = r.to_json() if hasattr(r, "to_json") else r
        lines.append(json.dumps(payload, sort_keys=True, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def loads_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.split("\n") if line.strip()]


def read_captions(path) -> list[GroundedCaption]:
    return [GroundedCaption.from_json(d) for d in loads_jsonl(Path(path).read_text(encoding="utf-8"))]


def write_captions(captions: Iterable[GroundedCaption], path) -> None:
    Path(path).write_text(dumps_jsonl(captions), encoding="utf-8")
