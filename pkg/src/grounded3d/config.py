"""Run configuration: one JSON file, overridable by command-line flags."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from . import alignment, captions, metrics, relations

# shown next to each key when the defaults are written out
_DOC = {
    "scenes": "scene JSON file or directory of scene files",
    "templates": "task template file; empty means the bundled templates",
    "prompts": "directory of prompt files overriding the bundled prompts",
    "cache": "replay store directory for LLM responses",
    "output": "output path",
    "radius": "local-scene search radius around the anchor, metres",
    "max_objects": "upper bound on objects in one local scene",
    "keep_prob": "range the per-label keep probability is drawn from",
    "word_cap": "captions must stay below this many words",
    "max_relations": "relation statements injected per caption",
    "seed": "master seed; required by generate",
    "temperature": "similarity temperature for text/referent logits",
    "lambda_cls": "weight of the phrase classification term",
    "focal_gamma": "focal loss focusing exponent",
    "focal_alpha": "focal loss positive-class weight",
    "score_filter": "minimum score for a grounding prediction to count in F1",
    "thresholds": "IoU thresholds for Acc/F1 and the extra AP columns",
    "grounding_rate": "probability that a converted question asks for grounding",
    "referent_mode": "one_to_many keeps grouped referents, one_to_one splits them",
    "jobs": "worker threads for per-scene generation",
}


@dataclass
class Config:
    scenes: str | None = None
    templates: str | None = None
    prompts: str | None = None
    cache: str | None = None
    output: str | None = None

    radius: float = captions.SEARCH_RADIUS
    max_objects: int = captions.MAX_LOCAL_OBJECTS
    keep_prob: tuple[float, float] = captions.KEEP_PROB_RANGE
    word_cap: int = captions.WORD_CAP
    max_relations: int = relations.MAX_RELATIONS_PER_CAPTION
    seed: int | None = None

    temperature: float = alignment.TEMPERATURE
    lambda_cls: float = float(alignment.LAMBDA_CLS)
    focal_gamma: float = float(alignment.FOCAL_GAMMA)
    focal_alpha: float = alignment.FOCAL_ALPHA

    score_filter: float = metrics.SCORE_FILTER
    thresholds: tuple[float, ...] = metrics.ACC_THRESHOLDS

    grounding_rate: float = 0.5
    referent_mode: str = "one_to_many"
    jobs: int = 1

    def __post_init__(self):
        self.keep_prob = tuple(float(x) for x in self.keep_prob)
        self.thresholds = tuple(float(x) for x in self.thresholds)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.keep_prob
        checks = [
            (self.radius > 0, "radius must be positive"),
            (self.max_objects >= 1, "max_objects must be at least 1"),
            (0 < lo <= hi <= 1, "keep_prob must satisfy 0 < low <= high <= 1"),
            (self.word_cap >= 1, "word_cap must be at least 1"),
            (self.max_relations >= 0, "max_relations must be non-negative"),
            (self.temperature > 0, "temperature must be positive"),
            (self.lambda_cls >= 0, "lambda_cls must be non-negative"),
            (self.focal_gamma >= 0, "focal_gamma must be non-negative"),
            (0 <= self.focal_alpha <= 1, "focal_alpha must lie in [0, 1]"),
            (0 <= self.score_filter <= 1, "score_filter must lie in [0, 1]"),
            (all(0 <= t <= 1 for t in self.thresholds) and self.thresholds, "thresholds must lie in [0, 1]"),
            (0 <= self.grounding_rate <= 1, "grounding_rate must lie in [0, 1]"),
            (self.referent_mode in ("one_to_one", "one_to_many"), "referent_mode must be one_to_one or one_to_many"),
            (self.jobs >= 1, "jobs must be at least 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        values = {k: v for k, v in data.items() if not k.startswith("_")}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))

    def with_overrides(self, **overrides: Any) -> "Config":
        """Copy with every non-None override applied."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def to_json(self, documented: bool = False) -> dict:
        d = dataclasses.asdict(self)
        d["keep_prob"] = list(self.keep_prob)
        d["thresholds"] = list(self.thresholds)
        if documented:
            d["_doc"] = dict(_DOC)
        return d
