"""Convert grounded scene-text data into referent-token instruction samples."""

from __future__ import annotations

import enum
import json
import re
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .llm import LLMClient, PromptSpec
from .markup import (
    GroundedCaption,
    MarkupError,
    PhraseCorrespondence,
    caption_from_markup,
    loads_jsonl,
    markup_from_parts,
)

REF = "<ref>"
GROUNDING_SUFFIX = "(with grounding)"
GENERIC_CATEGORY = "object"

_REF_RE = re.compile(re.escape(REF))
_PAIR_RE = re.compile(r"<p> (.*?) </p> ?<ref>")


class TaskKind(str, enum.Enum):
    DETECTION = "detection"
    SINGLE_GROUNDING = "single_grounding"
    MULTI_GROUNDING = "multi_grounding"
    DENSE_CAPTIONING = "dense_captioning"
    QA = "qa"
    SCENE_CAPTIONING = "scene_captioning"
    EMBODIED_DIALOGUE = "embodied_dialogue"
    EMBODIED_PLANNING = "embodied_planning"


class ConversionError(ValueError):
    pass


# placeholders every question / answer of a task must carry
_QUESTION_KEYS = {
    TaskKind.DETECTION: {"category"},
    TaskKind.SINGLE_GROUNDING: {"description"},
    TaskKind.MULTI_GROUNDING: {"description"},
    TaskKind.DENSE_CAPTIONING: {"category", "ref"},
    TaskKind.QA: {"question"},
    TaskKind.SCENE_CAPTIONING: set(),
    TaskKind.EMBODIED_DIALOGUE: {"category"},
    TaskKind.EMBODIED_PLANNING: set(),
}
_ANSWER_KEYS = {
    TaskKind.DETECTION: {"single": {"ref"}, "multiple": {"ref"}, "none": set()},
    TaskKind.SINGLE_GROUNDING: {"single": {"ref"}, "multiple": {"ref"}, "none": set()},
    TaskKind.MULTI_GROUNDING: {"single": {"ref"}, "multiple": {"ref"}, "none": set()},
    TaskKind.DENSE_CAPTIONING: {k: {"caption"} for k in ("single", "multiple", "none")},
    TaskKind.QA: {k: {"answer"} for k in ("single", "multiple", "none")},
    TaskKind.SCENE_CAPTIONING: {k: {"caption"} for k in ("single", "multiple", "none")},
    TaskKind.EMBODIED_DIALOGUE: {"single": {"ref"}, "multiple": {"ref"}, "none": set()},
    TaskKind.EMBODIED_PLANNING: {k: {"plan"} for k in ("single", "multiple", "none")},
}
MIN_QUESTIONS = 10

_FIELD = re.compile(r"\{([a-z_]+)\}")


def _fields(template: str) -> set[str]:
    return set(_FIELD.findall(template))


@dataclass(frozen=True)
class TaskTemplates:
    questions: tuple[str, ...]
    answers: dict  # outcome -> tuple of templates
    suffixes: tuple[str, ...] = ()


class TemplateLibrary:
    """Per-task question/answer templates, checked for their required placeholders."""

    def __init__(self, tasks: Mapping[TaskKind, TaskTemplates], min_questions: int = MIN_QUESTIONS):
        self.tasks = dict(tasks)
        for task, tt in self.tasks.items():
            if len(tt.questions) < min_questions:
                raise ConversionError(f"{task.value}: {len(tt.questions)} question templates, need {min_questions}")
            for q in tt.questions:
                missing = _QUESTION_KEYS[task] - _fields(q)
                if missing:
                    raise ConversionError(f"{task.value} question {q!r} lacks {sorted(missing)}")
            for outcome, need in _ANSWER_KEYS[task].items():
                options = tt.answers.get(outcome, ())
                if not options:
                    raise ConversionError(f"{task.value} has no {outcome!r} answer templates")
                for a in options:
                    missing = need - _fields(a)
                    if missing:
                        raise ConversionError(f"{task.value} {outcome} answer {a!r} lacks {sorted(missing)}")

    def __getitem__(self, task: TaskKind) -> TaskTemplates:
        try:
            return self.tasks[TaskKind(task)]
        except KeyError:
            raise ConversionError(f"no templates for task {TaskKind(task).value}") from None

    @classmethod
    def from_json(cls, data: Mapping, min_questions: int = MIN_QUESTIONS) -> "TemplateLibrary":
        tasks = {}
        for name, d in data.items():
            tasks[TaskKind(name)] = TaskTemplates(
                tuple(d["questions"]),
                {k: tuple(v) for k, v in d["answers"].items()},
                tuple(d.get("suffixes", ())),
            )
        return cls(tasks, min_questions)

    def to_json(self) -> dict:
        out = {}
        for task, tt in self.tasks.items():
            d = {"questions": list(tt.questions), "answers": {k: list(v) for k, v in tt.answers.items()}}
            if tt.suffixes:
                d["suffixes"] = list(tt.suffixes)
            out[task.value] = d
        return out

    @classmethod
    def load(cls, path: str | Path | None = None) -> "TemplateLibrary":
        if path is None:
            text = resources.files("grounded3d").joinpath("data", "templates.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class ReferentAnnotation:
    turn_index: int
    token_position: int
    ids: tuple[int, ...]
    phrase_span: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not self.ids:
            raise ValueError("a referent needs at least one id")
        if self.phrase_span is not None:
            object.__setattr__(self, "phrase_span", tuple(self.phrase_span))

    def to_json(self) -> dict:
        return {
            "turn": self.turn_index,
            "pos": self.token_position,
            "ids": list(self.ids),
            "phrase_span": None if self.phrase_span is None else list(self.phrase_span),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ReferentAnnotation":
        span = d.get("phrase_span")
        return cls(int(d["turn"]), int(d["pos"]), tuple(d["ids"]), None if span is None else tuple(span))


@dataclass(frozen=True)
class Turn:
    role: str  # user | assistant
    text: str


@dataclass(frozen=True)
class InstructionSample:
    scene_id: str
    task: TaskKind
    turns: tuple[Turn, ...]
    referents: tuple[ReferentAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "referents", tuple(sorted(self.referents, key=lambda r: (r.turn_index, r.token_position))))
        problems = sample_violations(self)
        if problems:
            raise ConversionError("; ".join(problems))

    @property
    def ids(self) -> set[int]:
        return {i for r in self.referents for i in r.ids}

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "task": self.task.value,
            "turns": [{"role": t.role, "text": t.text} for t in self.turns],
            "referents": [r.to_json() for r in self.referents],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "InstructionSample":
        return cls(
            d["scene_id"],
            TaskKind(d["task"]),
            tuple(Turn(t["role"], t["text"]) for t in d["turns"]),
            tuple(ReferentAnnotation.from_json(r) for r in d.get("referents", [])),
        )


def sample_violations(sample: InstructionSample) -> list[str]:
    """Structural problems with a sample; empty when it is well formed."""
    problems = []
    for k, turn in enumerate(sample.turns):
        expected = "user" if k % 2 == 0 else "assistant"
        if turn.role != expected:
            problems.append(f"turn {k} is {turn.role!r}, expected {expected!r}")
        opens = turn.text.count("<p>")
        closes = turn.text.count("</p>")
        if opens != closes:
            problems.append(f"turn {k} has {opens} <p> but {closes} </p>")
        if len(_PAIR_RE.findall(turn.text)) != opens:
            problems.append(f"turn {k} has a <p>...</p> pair not followed by {REF}")
        n_refs = len(_REF_RE.findall(turn.text))
        positions = sorted(r.token_position for r in sample.referents if r.turn_index == k)
        if positions != list(range(n_refs)):
            problems.append(f"turn {k} has {n_refs} {REF} tokens but referents at positions {positions}")
    stray = [r for r in sample.referents if not 0 <= r.turn_index < len(sample.turns)]
    if stray:
        problems.append(f"referents point at missing turns {[r.turn_index for r in stray]}")
    return problems


# -- rendering helpers ----------------------------------------------------------

def grounded_phrase(phrase: str) -> str:
    return f"<p> {phrase} </p> {REF}"


def embed_referents(text: str, correspondences: Sequence[PhraseCorrespondence]) -> str:
    """Wrap each corresponded phrase as ``<p> phrase </p> <ref>``."""
    out, cursor = [], 0
    for c in sorted(correspondences, key=lambda c: c.start):
        out.append(text[cursor:c.start])
        out.append(grounded_phrase(text[c.start:c.end]))
        cursor = c.end
    out.append(text[cursor:])
    return "".join(out)


def join_phrases(parts: Sequence[str]) -> str:
    if len(parts) <= 1:
        return "".join(parts)
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def _phrase_spans(text: str) -> list[tuple[int, int] | None]:
    """For each <ref> in order, the span of its companion phrase (or None)."""
    pairs = {m.end(): m.span(1) for m in _PAIR_RE.finditer(text)}
    return [pairs.get(m.end()) for m in _REF_RE.finditer(text)]


def derive_referent_correspondence(
    source: GroundedCaption | Sequence[PhraseCorrespondence],
    rendered_text: str,
    turn_index: int = 1,
) -> list[ReferentAnnotation]:
    """One annotation per ``<ref>`` in ``rendered_text``, taking ids from the source
    correspondences in text order."""
    corrs = source.correspondences if isinstance(source, GroundedCaption) else source
    corrs = sorted(corrs, key=lambda c: (c.start, c.end))
    spans = _phrase_spans(rendered_text)
    if len(spans) != len(corrs):
        raise ConversionError(f"{len(spans)} {REF} tokens for {len(corrs)} source correspondences")
    return [ReferentAnnotation(turn_index, k, c.ids, spans[k]) for k, c in enumerate(corrs)]


def render_dialogue(sample: InstructionSample) -> str:
    return "\n".join(("USER: " if t.role == "user" else "ASSISTANT: ") + t.text for t in sample.turns)


# -- referent grouping ------------------------------------------------------------

def group_referents(annotations: Iterable[ReferentAnnotation], mode: str) -> list[ReferentAnnotation]:
    """one_to_many keeps multi-object referents; one_to_one gives every id its own token."""
    anns = sorted(annotations, key=lambda r: (r.turn_index, r.token_position))
    if mode == "one_to_many":
        return anns
    if mode != "one_to_one":
        raise ValueError(f"unknown referent mode {mode!r}")
    out, shift, turn = [], 0, None
    for r in anns:
        if r.turn_index != turn:
            turn, shift = r.turn_index, 0
        for k, i in enumerate(r.ids):
            out.append(ReferentAnnotation(r.turn_index, r.token_position + shift + k, (i,), r.phrase_span))
        shift += len(r.ids) - 1
    return out


def regroup_sample(sample: InstructionSample, mode: str) -> InstructionSample:
    """Apply :func:`group_referents` and rewrite the ``<ref>`` tokens to match."""
    if mode == "one_to_many":
        return sample
    counts: dict[tuple[int, int], int] = {(r.turn_index, r.token_position): len(r.ids) for r in sample.referents}
    turns = []
    for k, t in enumerate(sample.turns):
        pieces = _REF_RE.split(t.text)
        text = pieces[0]
        for pos, rest in enumerate(pieces[1:]):
            text += " ".join([REF] * counts.get((k, pos), 1)) + rest
        turns.append(Turn(t.role, text))
    spans_by_turn = {k: _phrase_spans(t.text) for k, t in enumerate(turns)}
    regrouped = [
        ReferentAnnotation(r.turn_index, r.token_position, r.ids, spans_by_turn[r.turn_index][r.token_position])
        for r in group_referents(sample.referents, mode)
    ]
    # only the first token of an expanded group directly follows its </p>
    return InstructionSample(sample.scene_id, sample.task, tuple(turns), tuple(regrouped))


# -- conversion --------------------------------------------------------------------

def _rng(caption: GroundedCaption, task: TaskKind, seed: int) -> np.random.Generator:
    key = zlib.crc32(f"{caption.scene_id}\0{task.value}\0{caption.text}".encode("utf-8"))
    return np.random.default_rng([seed, key])


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _fill(template: str, values: Mapping[str, str]) -> str:
    def repl(m: re.Match) -> str:
        key = m.group(1)
        if key not in values:
            raise ConversionError(f"template {template!r} uses unknown placeholder {{{key}}}")
        return values[key]

    return _FIELD.sub(repl, template)


def _outcome(n_ids: int) -> str:
    return "none" if n_ids == 0 else "single" if n_ids == 1 else "multiple"


def _question(task: TaskKind, tt: TaskTemplates, rng, values: Mapping[str, str], grounding: bool) -> str:
    q = _fill(_pick(rng, tt.questions), values)
    if grounding:
        q = f"{q} {GROUNDING_SUFFIX}"
    return q


def _target_correspondences(caption: GroundedCaption) -> list[PhraseCorrespondence]:
    targets = caption.provenance.get("target_ids")
    if targets is None:
        return list(caption.correspondences)
    targets = set(targets)
    return [c for c in caption.correspondences if set(c.ids) <= targets]


def _category(caption: GroundedCaption) -> str:
    return (caption.provenance.get("category") or "").strip() or GENERIC_CATEGORY


def is_bare_phrase(text: str, max_words: int = 5) -> bool:
    t = text.strip()
    return 0 < len(t.split()) <= max_words and not t.endswith((".", "!", "?"))


def _grounded_answer(caption, corrs, tt, rng, values) -> tuple[str, list[ReferentAnnotation]]:
    parts = [grounded_phrase(c.phrase(caption.text)) for c in corrs]
    n_ids = len({i for c in corrs for i in c.ids})
    answer = _fill(_pick(rng, tt.answers[_outcome(n_ids)]), {**values, "ref": join_phrases(parts)})
    refs = derive_referent_correspondence(corrs, answer, turn_index=1)
    return answer, refs


def convert_task(
    caption: GroundedCaption,
    task: TaskKind | str,
    templates: TemplateLibrary,
    grounding_requested: bool,
    seed: int,
) -> InstructionSample:
    task = TaskKind(task)
    tt = templates[task]
    rng = _rng(caption, task, seed)
    prov = caption.provenance

    if task is TaskKind.DETECTION:
        if "category" not in prov:
            raise ConversionError("detection needs a 'category' in the caption provenance")
        values = {"category": _category(caption)}
        question = _question(task, tt, rng, values, grounding_requested)
        answer, refs = _grounded_answer(caption, list(caption.correspondences), tt, rng, values)
        turns = [Turn("user", question), Turn("assistant", answer)]

    elif task in (TaskKind.SINGLE_GROUNDING, TaskKind.MULTI_GROUNDING):
        corrs = _target_correspondences(caption)
        if task is TaskKind.SINGLE_GROUNDING and len(corrs) != 1:
            raise ConversionError(f"single grounding needs exactly one target phrase, caption has {len(corrs)}")
        description = prov.get("description", caption.text)
        values = {"description": description}
        question = _question(task, tt, rng, values, grounding_requested)
        answer, refs = _grounded_answer(caption, corrs, tt, rng, values)
        turns = [Turn("user", question), Turn("assistant", answer)]

    elif task is TaskKind.DENSE_CAPTIONING:
        target = prov.get("target_ids")
        if not target:
            raise ConversionError("dense captioning needs 'target_ids' in the caption provenance")
        values = {"category": _category(caption), "ref": REF}
        question = _question(task, tt, rng, values, grounding_requested)
        answer = _fill(_pick(rng, tt.answers["single"]),
                       {"caption": embed_referents(caption.text, caption.correspondences)})
        refs = [ReferentAnnotation(0, 0, tuple(target))]
        refs += derive_referent_correspondence(caption, answer, turn_index=1)
        turns = [Turn("user", question), Turn("assistant", answer)]

    elif task is TaskKind.QA:
        if "question" not in prov:
            raise ConversionError("qa needs a 'question' in the caption provenance")
        question = _question(task, tt, rng, {"question": prov["question"]}, False)
        if tt.suffixes and is_bare_phrase(caption.text):
            question = f"{question} {_pick(rng, tt.suffixes)}"
        if grounding_requested:
            question = f"{question} {GROUNDING_SUFFIX}"
        answer = _fill(_pick(rng, tt.answers["single"]),
                       {"answer": embed_referents(caption.text, caption.correspondences)})
        refs = derive_referent_correspondence(caption, answer, turn_index=1)
        turns = [Turn("user", question), Turn("assistant", answer)]

    elif task is TaskKind.SCENE_CAPTIONING:
        question = _question(task, tt, rng, {}, grounding_requested)
        answer = _fill(_pick(rng, tt.answers["single"]),
                       {"caption": embed_referents(caption.text, caption.correspondences)})
        refs = derive_referent_correspondence(caption, answer, turn_index=1)
        turns = [Turn("user", question), Turn("assistant", answer)]

    elif task is TaskKind.EMBODIED_DIALOGUE:
        dialogue = prov.get("dialogue")
        if not dialogue:
            raise ConversionError("embodied dialogue needs a 'dialogue' turn list in the provenance")
        turns, refs = [], []
        for k, raw in enumerate(dialogue):
            piece = caption_from_markup(caption.scene_id, raw["markup"])
            text = embed_referents(piece.text, piece.correspondences)
            if k == 0 and grounding_requested:
                text = f"{text} {GROUNDING_SUFFIX}"
            turns.append(Turn("user" if k % 2 == 0 else "assistant", text))
            refs += derive_referent_correspondence(piece, text, turn_index=k)

    else:  # EMBODIED_PLANNING
        if "instruction" not in prov or "plan" not in prov:
            raise ConversionError("embodied planning needs 'instruction' and 'plan' in the provenance")
        instr = caption_from_markup(caption.scene_id, prov["instruction"])
        plan = caption_from_markup(caption.scene_id, prov["plan"])
        instr_text = embed_referents(instr.text, instr.correspondences)
        values = {"instruction": instr_text, "instruction_lc": instr_text[:1].lower() + instr_text[1:]}
        question = _question(task, tt, rng, values, grounding_requested)
        answer = _fill(_pick(rng, tt.answers["single"]), {"plan": embed_referents(plan.text, plan.correspondences)})
        refs = derive_referent_correspondence(instr, question, turn_index=0)
        refs += derive_referent_correspondence(plan, answer, turn_index=1)
        turns = [Turn("user", question), Turn("assistant", answer)]

    return InstructionSample(caption.scene_id, task, tuple(turns), tuple(refs))


# -- builders for task-shaped captions ------------------------------------------------

def detection_caption(scene_id: str, category: str, ids: Sequence[int]) -> GroundedCaption:
    """Category prompt whose single phrase covers every instance of the category."""
    corrs = (PhraseCorrespondence(0, len(category), tuple(ids)),) if ids else ()
    return GroundedCaption(scene_id, category, corrs, {"category": category})


def dense_caption(caption: GroundedCaption, target_ids: Sequence[int], category: str | None = None) -> GroundedCaption:
    prov = dict(caption.provenance)
    prov["target_ids"] = list(target_ids)
    if category:
        prov["category"] = category
    return GroundedCaption(caption.scene_id, caption.text, caption.correspondences, prov)


def _bracket(caption: GroundedCaption, c: PhraseCorrespondence) -> str:
    return markup_from_parts(c.phrase(caption.text), [PhraseCorrespondence(0, c.end - c.start, c.ids)])


def _distinct(corrs: Iterable[PhraseCorrespondence]) -> list[PhraseCorrespondence]:
    """First correspondence for each distinct id set."""
    seen, out = set(), []
    for c in corrs:
        if c.ids not in seen:
            seen.add(c.ids)
            out.append(c)
    return out


def fallback_dialogue(caption: GroundedCaption) -> list[dict]:
    corrs = _distinct(caption.correspondences)[:2]
    if not corrs:
        return [{"role": "user", "markup": "What is in this room?"},
                {"role": "assistant", "markup": "I cannot see any objects I could point out."}]
    turns = [{"role": "user", "markup": "Could you help me find something in this room?"},
             {"role": "assistant", "markup": "Of course. What are you looking for?"}]
    for c in corrs:
        phrase = c.phrase(caption.text)
        turns.append({"role": "user", "markup": f"Where is the {phrase}?"})
        turns.append({"role": "assistant", "markup": f"It is right here, the {_bracket(caption, c)}."})
    return turns


def fallback_plan(caption: GroundedCaption) -> tuple[str, str]:
    corrs = _distinct(caption.correspondences)[:3]
    if not corrs:
        return "Take a look around the room.", "1. Turn around slowly and look at the room."
    first = _bracket(caption, corrs[0])
    steps = [f"1. Walk over to the {first}."]
    for k, c in enumerate(corrs[1:], start=2):
        steps.append(f"{k}. Check the {_bracket(caption, c)} on the way.")
    steps.append(f"{len(steps) + 1}. Return and report what you found.")
    return f"Go and inspect the {first}.", "\n".join(steps)


def _checked(scene_id: str, markup: str, allowed: set[int]) -> GroundedCaption:
    piece = caption_from_markup(scene_id, markup)
    unknown = piece.ids - allowed
    if unknown:
        raise ConversionError(f"generated text cites ids {sorted(unknown)} absent from the source caption")
    return piece


_SPEAKER = re.compile(r"^\s*(human|user|robot|assistant)\s*:\s*(.*)$", re.IGNORECASE)


def parse_dialogue(text: str) -> list[dict]:
    turns = []
    for line in text.splitlines():
        m = _SPEAKER.match(line)
        if m is None:
            if turns and line.strip():
                turns[-1]["markup"] += " " + line.strip()
            continue
        role = "user" if m.group(1).lower() in ("human", "user") else "assistant"
        if turns and turns[-1]["role"] == role:
            turns[-1]["markup"] += " " + m.group(2).strip()
        else:
            turns.append({"role": role, "markup": m.group(2).strip()})
    while turns and turns[0]["role"] != "user":
        turns.pop(0)
    return turns


def embodied_dialogue_caption(caption: GroundedCaption, client: LLMClient, spec: PromptSpec | None = None) -> GroundedCaption:
    """Ask the client for a human/agent conversation about the scene; the result
    carries the turns as grounded markup in its provenance."""
    spec = spec or PromptSpec.builtin("embodied_dialogue")
    source = markup_from_parts(caption.text, caption.correspondences)
    raw = client.complete(spec, {"Grounded scene caption": source},
                          fallback=lambda: "\n".join(
                              ("Human: " if t["role"] == "user" else "Robot: ") + t["markup"]
                              for t in fallback_dialogue(caption)))
    turns = parse_dialogue(raw)
    if not turns:
        raise ConversionError("generated dialogue has no turns")
    try:
        for t in turns:
            _checked(caption.scene_id, t["markup"], caption.ids)
    except MarkupError as exc:
        raise ConversionError(f"generated dialogue is not valid markup: {exc}") from exc
    prov = dict(caption.provenance)
    prov["dialogue"] = turns
    return GroundedCaption(caption.scene_id, caption.text, caption.correspondences, prov)


def embodied_plan_caption(caption: GroundedCaption, client: LLMClient, spec: PromptSpec | None = None) -> GroundedCaption:
    spec = spec or PromptSpec.builtin("embodied_planning")
    source = markup_from_parts(caption.text, caption.correspondences)

    def fallback() -> str:
        instruction, plan = fallback_plan(caption)
        return f"Instruction: {instruction}\n{plan}"

    raw = client.complete(spec, {"Grounded scene caption": source}, fallback=fallback)
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines or not lines[0].lower().startswith("instruction:"):
        raise ConversionError("generated plan does not start with an 'Instruction:' line")
    instruction = lines[0].split(":", 1)[1].strip()
    plan = "\n".join(lines[1:])
    if not instruction or not plan:
        raise ConversionError("generated plan is missing its instruction or its steps")
    try:
        _checked(caption.scene_id, instruction, caption.ids)
        _checked(caption.scene_id, plan, caption.ids)
    except MarkupError as exc:
        raise ConversionError(f"generated plan is not valid markup: {exc}") from exc
    prov = dict(caption.provenance)
    prov["instruction"] = instruction
    prov["plan"] = plan
    return GroundedCaption(caption.scene_id, caption.text, caption.correspondences, prov)


def _anchor(caption: GroundedCaption) -> int | None:
    sel = caption.provenance.get("selection")
    return None if not sel else int(sel["anchor"])


def task_inputs(caption: GroundedCaption, labels: Mapping[int, str],
                tasks: Iterable[TaskKind | str]) -> list[tuple[TaskKind, GroundedCaption]]:
    """Task-shaped views of one scene caption. Tasks the caption cannot feed are skipped."""
    out = []
    anchor = _anchor(caption)
    for task in map(TaskKind, tasks):
        if task is TaskKind.SCENE_CAPTIONING:
            out.append((task, caption))
        elif task is TaskKind.MULTI_GROUNDING and caption.correspondences:
            prov = {**caption.provenance, "description": caption.text}
            corrs = tuple(_distinct(caption.correspondences))
            out.append((task, GroundedCaption(caption.scene_id, caption.text, corrs, prov)))
        elif task is TaskKind.SINGLE_GROUNDING and anchor is not None:
            own = [c for c in caption.correspondences if c.ids == (anchor,)]
            if own:
                prov = {**caption.provenance, "description": caption.text, "target_ids": [anchor]}
                out.append((task, GroundedCaption(caption.scene_id, caption.text, (own[0],), prov)))
        elif task is TaskKind.DENSE_CAPTIONING and anchor is not None and anchor in labels:
            out.append((task, dense_caption(caption, [anchor], labels[anchor])))
        elif task is TaskKind.QA:
            for rel in caption.provenance.get("relations", []):
                if rel["kind"] != "supported_by":
                    continue
                upper, lower = rel["target"], rel["anchors"][0]
                if upper not in labels or lower not in labels:
                    continue
                text = f"the {labels[lower]}"
                corr = PhraseCorrespondence(0, len(text), (lower,))
                prov = {"question": f"What is the {labels[upper]} standing on?"}
                out.append((task, GroundedCaption(caption.scene_id, text, (corr,), prov)))
                break
    return out


def detection_inputs(scene_id: str, labels: Mapping[int, str], absent: Sequence[str] = ()) -> list[GroundedCaption]:
    """One detection prompt per present category, plus the given absent ones."""
    by_label: dict[str, list[int]] = {}
    for i, lab in sorted(labels.items()):
        by_label.setdefault(lab, []).append(i)
    caps = [detection_caption(scene_id, lab, ids) for lab, ids in sorted(by_label.items())]
    caps += [detection_caption(scene_id, lab, []) for lab in absent if lab not in by_label]
    return caps


def read_samples(path: str | Path) -> list[InstructionSample]:
    return [InstructionSample.from_json(d) for d in loads_jsonl(Path(path).read_text("utf-8"))]
