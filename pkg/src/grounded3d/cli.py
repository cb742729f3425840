"""Command-line entry point: generate, convert, stats, eval, check."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks
from .captions import generate_scene_captions, corpus_stats, condense_object_caption
from .config import Config
from .instructions import (
    ConversionError,
    InstructionSample,
    TaskKind,
    TemplateLibrary,
    convert_task,
    detection_inputs,
    embodied_dialogue_caption,
    embodied_plan_caption,
    read_samples,
    regroup_sample,
    task_inputs,
)
from .llm import LLMClient, LLMError, PromptSpec, ReplayStore
from .markup import dumps_jsonl, loads_jsonl, read_captions
from .metrics import (
    CaptionPrediction,
    CaptionTruth,
    DetectionPrediction,
    DetectionTruth,
    GroundingPrediction,
    GroundingTruth,
    MetricReport,
    detection_ap,
    grounding_accuracy,
    iou_gated_caption_metrics,
    multi_grounding_f1,
)
from .scene import Scene, box_from_mask, load_scenes
from .synthetic import ABSENT_LABELS

log = logging.getLogger("grounded3d")


class CommandError(RuntimeError):
    pass


# -- shared plumbing ----------------------------------------------------------------

def _load_prompt(name: str, prompts_dir: str | None) -> PromptSpec:
    if prompts_dir:
        p = Path(prompts_dir) / f"{name}.json"
        if p.exists():
            return PromptSpec.load(p)
    return PromptSpec.builtin(name)


def _client(args, cfg: Config) -> LLMClient:
    store = ReplayStore(cfg.cache) if cfg.cache else None
    if args.live:
        if store is None:
            raise CommandError("--live needs --cache to record responses")
        return LLMClient("live", store)
    if args.replay:
        if store is None:
            raise CommandError("--replay needs --cache")
        return LLMClient("replay", store, fallback_on_miss=args.fallback)
    return LLMClient("fallback")


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    keys = ("scenes", "templates", "prompts", "cache", "output", "seed", "radius", "max_objects",
            "word_cap", "max_relations", "grounding_rate", "referent_mode", "jobs", "score_filter")
    return cfg.with_overrides(**{k: getattr(args, k, None) for k in keys})


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _scenes(cfg: Config) -> list[Scene]:
    if not cfg.scenes:
        raise CommandError("no scenes given (--scenes or config 'scenes')")
    return load_scenes(cfg.scenes)


# -- generate -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.seed is None:
        raise CommandError("generate needs --seed (or 'seed' in the config)")
    scenes = _scenes(cfg)
    client = _client(args, cfg)
    compose_spec = _load_prompt("scene_caption", cfg.prompts)
    relation_spec = _load_prompt("insert_relations", cfg.prompts)
    descriptions = {}
    if args.object_descriptions:
        for d in loads_jsonl(Path(args.object_descriptions).read_text("utf-8")):
            descriptions[(d["scene_id"], int(d["id"]))] = d["description"]
    phrase_spec = _load_prompt("object_phrase", cfg.prompts)

    def run(scene: Scene):
        object_captions = None
        if descriptions:
            object_captions = {
                i: condense_object_caption(scene.instance(i).label, descriptions[(scene.scene_id, i)], i,
                                           client, phrase_spec)
                for i in scene.ids if (scene.scene_id, i) in descriptions
            }
        return generate_scene_captions(
            scene, client, cfg.seed,
            object_captions=object_captions,
            radius=cfg.radius, max_objects=cfg.max_objects, keep_range=cfg.keep_prob,
            word_cap=cfg.word_cap, max_relations=cfg.max_relations,
            compose_spec=compose_spec, relation_spec=relation_spec,
        )

    scenes = sorted(scenes, key=lambda s: s.scene_id)
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        results = list(pool.map(run, scenes))  # map keeps scene order
    accepted, rejected = [], []
    for scene, res in zip(scenes, results):
        accepted += res.accepted
        rejected += [{"scene_id": scene.scene_id, "anchor": a, "reason": r.reason, "detail": r.detail}
                     for a, r in res.rejected]
    _write(dumps_jsonl(accepted), cfg.output)
    if args.rejections:
        Path(args.rejections).write_text(dumps_jsonl(rejected), encoding="utf-8")
    log.info("generated %d captions, rejected %d", len(accepted), len(rejected))
    return 0


# -- convert ----------------------------------------------------------------------------

def _scene_rng(seed: int, scene_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode("utf-8"))])


def convert_corpus(captions, scenes: Sequence[Scene], templates: TemplateLibrary, tasks: Sequence[TaskKind],
                   seed: int, grounding_rate: float, referent_mode: str,
                   client: LLMClient | None = None, prompts_dir: str | None = None) -> tuple[list[InstructionSample], int]:
    """All requested tasks for every caption, ordered by scene id. Returns (samples, skipped)."""
    labels = {s.scene_id: s.labels() for s in scenes}
    by_scene: dict[str, list] = {s.scene_id: [] for s in scenes}
    for cap in captions:
        by_scene.setdefault(cap.scene_id, []).append(cap)
    dialogue_spec = _load_prompt("embodied_dialogue", prompts_dir)
    plan_spec = _load_prompt("embodied_planning", prompts_dir)
    samples, skipped = [], 0
    for scene_id in sorted(by_scene):
        rng = _scene_rng(seed, scene_id)
        scene_labels = labels.get(scene_id, {})
        inputs = []
        if TaskKind.DETECTION in tasks and scene_labels:
            inputs += [(TaskKind.DETECTION, c) for c in detection_inputs(scene_id, scene_labels, ABSENT_LABELS[:1])]
        for cap in by_scene[scene_id]:
            inputs += task_inputs(cap, scene_labels, [t for t in tasks if t is not TaskKind.DETECTION])
            if client is not None and TaskKind.EMBODIED_DIALOGUE in tasks:
                try:
                    inputs.append((TaskKind.EMBODIED_DIALOGUE, embodied_dialogue_caption(cap, client, dialogue_spec)))
                except ConversionError as exc:
                    log.warning("%s: dialogue skipped: %s", scene_id, exc)
                    skipped += 1
            if client is not None and TaskKind.EMBODIED_PLANNING in tasks:
                try:
                    inputs.append((TaskKind.EMBODIED_PLANNING, embodied_plan_caption(cap, client, plan_spec)))
                except ConversionError as exc:
                    log.warning("%s: plan skipped: %s", scene_id, exc)
                    skipped += 1
        for task, cap in inputs:
            grounding = bool(rng.random() < grounding_rate)
            try:
                sample = convert_task(cap, task, templates, grounding, seed)
            except ConversionError as exc:
                log.warning("%s/%s skipped: %s", scene_id, task.value, exc)
                skipped += 1
                continue
            samples.append(regroup_sample(sample, referent_mode))
    return samples, skipped


def cmd_convert(args) -> int:
    cfg = _config(args)
    seed = 0 if cfg.seed is None else cfg.seed
    templates = TemplateLibrary.load(cfg.templates)
    tasks = [TaskKind(t) for t in args.tasks.split(",")] if args.tasks else list(TaskKind)
    scenes = load_scenes(cfg.scenes) if cfg.scenes else []
    embodied = {TaskKind.EMBODIED_DIALOGUE, TaskKind.EMBODIED_PLANNING} & set(tasks)
    client = _client(args, cfg) if embodied else None
    samples, skipped = convert_corpus(read_captions(args.captions), scenes, templates, tasks, seed,
                                      cfg.grounding_rate, cfg.referent_mode, client, cfg.prompts)
    _write(dumps_jsonl(samples), cfg.output)
    log.info("converted %d samples, skipped %d", len(samples), skipped)
    return 0


# -- stats --------------------------------------------------------------------------------

def cmd_stats(args) -> int:
    stats = corpus_stats(read_captions(args.captions))
    _write(json.dumps(stats.to_json(), indent=2, sort_keys=True) + "\n", args.output)
    return 0


# -- eval ---------------------------------------------------------------------------------

_PAIR = re.compile(r"<p> (.*?) </p>(?: <ref>)+")


def plain_text(turn_text: str) -> str:
    """Turn text with the grounding tokens removed."""
    return re.sub(r"\s*<ref>", "", _PAIR.sub(r"\1", turn_text)).strip()


def self_eval_fixtures(scenes: Sequence[Scene], samples: Sequence[InstructionSample]) -> dict:
    """Ground truth from the corpus, with predictions equal to it."""
    by_id = {s.scene_id: s for s in scenes}
    single, multi, cap_gts = [], [], []
    for k, s in enumerate(samples):
        scene = by_id.get(s.scene_id)
        if scene is None:
            continue
        qid = f"{s.scene_id}/{k}"
        answer_ids = sorted({i for r in s.referents if r.turn_index == 1 for i in r.ids})
        if s.task is TaskKind.SINGLE_GROUNDING and answer_ids:
            mask = set().union(*(scene.instance(i).mask for i in answer_ids))
            single.append(GroundingTruth(qid, (box_from_mask(scene, mask),)))
        elif s.task is TaskKind.MULTI_GROUNDING:
            multi.append(GroundingTruth(qid, tuple(box_from_mask(scene, scene.instance(i).mask) for i in answer_ids)))
        elif s.task is TaskKind.DENSE_CAPTIONING:
            target = [r for r in s.referents if r.turn_index == 0]
            if target:
                mask = set().union(*(scene.instance(i).mask for i in target[0].ids))
                cap_gts.append(CaptionTruth(qid, box_from_mask(scene, mask), (plain_text(s.turns[1].text),)))
    det = [DetectionTruth(s.scene_id, inst.label, inst.mask) for s in sorted(scenes, key=lambda x: x.scene_id)
           for inst in s.instances]
    return {
        "single": (single, [GroundingPrediction(g.query_id, g.boxes, (0.9,)) for g in single]),
        "multi": (multi, [GroundingPrediction(g.query_id, g.boxes, (0.9,) * len(g.boxes)) for g in multi]),
        "detection": (det, [DetectionPrediction(g.scene_id, g.label, g.mask, 1.0) for g in det]),
        "caption": (cap_gts, [CaptionPrediction(g.key, g.box, g.references[0]) for g in cap_gts]),
    }


def evaluate(kind: str, gts, preds, cfg: Config) -> MetricReport:
    if kind == "grounding":
        return grounding_accuracy(preds, gts, cfg.thresholds)
    if kind == "multi":
        return multi_grounding_f1(preds, gts, cfg.score_filter, cfg.thresholds)
    if kind == "detection":
        return detection_ap(preds, gts, extra_thresholds=cfg.thresholds)
    if kind == "caption":
        return iou_gated_caption_metrics(preds, gts, cfg.thresholds)
    raise CommandError(f"unknown evaluation kind {kind!r}")


_READERS = {
    "grounding": (GroundingTruth, GroundingPrediction),
    "multi": (GroundingTruth, GroundingPrediction),
    "detection": (DetectionTruth, DetectionPrediction),
    "caption": (CaptionTruth, CaptionPrediction),
}


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.self:
        if not args.samples:
            raise CommandError("eval --self needs --samples")
        fx = self_eval_fixtures(_scenes(cfg), read_samples(args.samples))
        report = MetricReport()
        plan = [("grounding", "single"), ("multi", "multi"), ("detection", "detection"), ("caption", "caption")]
        for kind, key in plan:
            gts, preds = fx[key]
            if gts:
                part = evaluate(kind, gts, preds, cfg)
                counts = {f"{kind}.{k}": v for k, v in part.counts.items()}
                report = report.merged(MetricReport(part.metrics, counts))
    else:
        if not (args.kind and args.pred and args.gt):
            raise CommandError("eval needs --kind, --pred and --gt (or --self)")
        gt_cls, pred_cls = _READERS[args.kind]
        gts = [gt_cls.from_json(d) for d in loads_jsonl(Path(args.gt).read_text("utf-8"))]
        preds = [pred_cls.from_json(d) for d in loads_jsonl(Path(args.pred).read_text("utf-8"))]
        report = evaluate(args.kind, gts, preds, cfg)
    _write(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", cfg.output)
    return 0


# -- check --------------------------------------------------------------------------------

def cmd_check(args) -> int:
    cfg = _config(args)
    results = checks.builtin_checks(0 if cfg.seed is None else cfg.seed)
    scenes = load_scenes(cfg.scenes) if cfg.scenes else []
    caps = read_captions(args.captions) if args.captions else []
    samples = read_samples(args.samples) if args.samples else []
    results += checks.corpus_checks(scenes, caps, samples)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grounded3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenes=True, output=True):
        sp.add_argument("--config", help="JSON config file; flags override it")
        if scenes:
            sp.add_argument("--scenes", help="scene JSON file or directory")
        if output:
            sp.add_argument("-o", "--output", help="output file (default: stdout)")

    def llm_flags(sp):
        sp.add_argument("--live", action="store_true", help="call the LLM endpoint and record responses")
        sp.add_argument("--replay", action="store_true", help="answer only from the replay cache")
        sp.add_argument("--fallback", action="store_true",
                        help="deterministic composer; with --replay, used on cache misses")
        sp.add_argument("--cache", help="replay cache directory")
        sp.add_argument("--prompts", help="directory of prompt files overriding the bundled ones")

    g = sub.add_parser("generate", help="grounded scene captions from scenes")
    common(g)
    llm_flags(g)
    g.add_argument("--seed", type=int, help="master seed (required)")
    g.add_argument("--jobs", type=int)
    g.add_argument("--radius", type=float)
    g.add_argument("--max-objects", dest="max_objects", type=int)
    g.add_argument("--word-cap", dest="word_cap", type=int)
    g.add_argument("--max-relations", dest="max_relations", type=int)
    g.add_argument("--object-descriptions", help="JSONL of {scene_id, id, description} to condense")
    g.add_argument("--rejections", help="write rejected anchors here as JSONL")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("convert", help="instruction samples from grounded captions")
    common(c)
    llm_flags(c)
    c.add_argument("captions", help="grounded caption JSONL")
    c.add_argument("--seed", type=int)
    c.add_argument("--templates", help="task template JSON (default: bundled)")
    c.add_argument("--tasks", help="comma-separated task kinds (default: all)")
    c.add_argument("--grounding-rate", dest="grounding_rate", type=float)
    c.add_argument("--referent-mode", dest="referent_mode", choices=["one_to_one", "one_to_many"])
    c.set_defaults(func=cmd_convert)

    s = sub.add_parser("stats", help="corpus statistics for grounded captions")
    s.add_argument("captions")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_stats)

    e = sub.add_parser("eval", help="metric report as JSON")
    common(e)
    e.add_argument("--self", action="store_true", help="score perfect predictions built from the corpus")
    e.add_argument("--samples", help="instruction JSONL (with --self)")
    e.add_argument("--kind", choices=sorted(_READERS))
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--score-filter", dest="score_filter", type=float)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("check", help="oracle self-checks and corpus invariants")
    common(k, output=False)
    k.add_argument("--captions")
    k.add_argument("--samples")
    k.add_argument("--seed", type=int)
    k.set_defaults(func=cmd_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, LLMError, ConversionError, ValueError, KeyError, OSError) as exc:
        print(f"grounded3d {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
