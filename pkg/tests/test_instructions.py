import json

import pytest
from hypothesis import given, strategies as st

from grounded3d.instructions import (
    GROUNDING_SUFFIX,
    REF,
    ConversionError,
    InstructionSample,
    ReferentAnnotation,
    TaskKind,
    TemplateLibrary,
    Turn,
    convert_task,
    dense_caption,
    derive_referent_correspondence,
    detection_caption,
    detection_inputs,
    embed_referents,
    embodied_dialogue_caption,
    embodied_plan_caption,
    group_referents,
    join_phrases,
    parse_dialogue,
    regroup_sample,
    render_dialogue,
    sample_violations,
    task_inputs,
)
from grounded3d.llm import LLMClient
from grounded3d.markup import GroundedCaption, PhraseCorrespondence, caption_from_markup

from strategies import grounded_captions, instruction_samples

LIB = TemplateLibrary.load()
FALLBACK = LLMClient("fallback")


def only_dense_template(question):
    data = LIB.to_json()
    data["dense_captioning"]["questions"] = [question] * 10
    return TemplateLibrary.from_json(data)


def test_dense_captioning_example_is_byte_identical():
    lib = only_dense_template("Describe the {category} {ref} in the scene.")
    cap = dense_caption(caption_from_markup("scene0000", "[A black chair 7] with four legs."), [7])
    sample = convert_task(cap, "dense_captioning", lib, grounding_requested=False, seed=0)
    want = "USER: Describe the object <ref> in the scene.\nASSISTANT: <p> A black chair </p> <ref> with four legs."
    assert render_dialogue(sample) == want
    assert [r.to_json() for r in sample.referents] == [
        {"turn": 0, "pos": 0, "ids": [7], "phrase_span": None},
        {"turn": 1, "pos": 0, "ids": [7], "phrase_span": [4, 17]},
    ]
    assert sample.turns[1].text[4:17] == "A black chair"


def test_bundled_templates_have_ten_questions_each():
    for task in TaskKind:
        assert len(LIB[task].questions) >= 10


def test_template_validation():
    data = LIB.to_json()
    data["detection"]["questions"] = data["detection"]["questions"][:9]
    with pytest.raises(ConversionError, match="question templates"):
        TemplateLibrary.from_json(data)
    data = LIB.to_json()
    data["detection"]["questions"][0] = "Find things."
    with pytest.raises(ConversionError, match="lacks"):
        TemplateLibrary.from_json(data)
    data = LIB.to_json()
    del data["qa"]["answers"]["single"]
    with pytest.raises(ConversionError):
        TemplateLibrary.from_json(data)
    assert TemplateLibrary.from_json(LIB.to_json()).to_json() == LIB.to_json()


@pytest.mark.parametrize("ids,outcome", [((), "none"), ((3,), "single"), ((3, 5, 8), "multiple")])
def test_detection_outcomes(ids, outcome):
    cap = detection_caption("s", "chair", ids)
    sample = convert_task(cap, "detection", LIB, False, seed=1)
    answer = sample.turns[1].text
    assert answer in [a.replace("{category}", "chair").replace("{ref}", "<p> chair </p> <ref>")
                      for a in LIB[TaskKind.DETECTION].answers[outcome]]
    assert sample.ids == set(ids)
    assert answer.count(REF) == (1 if ids else 0)


def test_detection_needs_category():
    with pytest.raises(ConversionError):
        convert_task(caption_from_markup("s", "[chair 1]"), "detection", LIB, False, 0)


def test_grounding_suffix_is_appended_only_on_request():
    cap = detection_caption("s", "lamp", [2])
    on = convert_task(cap, "detection", LIB, True, seed=4)
    off = convert_task(cap, "detection", LIB, False, seed=4)
    assert on.turns[0].text == off.turns[0].text + " " + GROUNDING_SUFFIX
    assert not off.turns[0].text.endswith(GROUNDING_SUFFIX)


def test_single_grounding_requires_one_phrase():
    two = caption_from_markup("s", "The [cup 1] beside the [book 2].")
    with pytest.raises(ConversionError):
        convert_task(two, "single_grounding", LIB, False, 0)
    one = GroundedCaption(two.scene_id, two.text, two.correspondences, {"target_ids": [1]})
    sample = convert_task(one, "single_grounding", LIB, False, 0)
    assert sample.ids == {1}


def test_multi_grounding_lists_every_phrase():
    cap = caption_from_markup("s", "The [cup 1], the [book 2] and the [lamp 3 4].")
    sample = convert_task(cap, "multi_grounding", LIB, False, 2)
    assert "<p> cup </p> <ref>, <p> book </p> <ref> and <p> lamp </p> <ref>" in sample.turns[1].text
    assert [r.ids for r in sample.referents] == [(1,), (2,), (3, 4)]
    assert cap.text in sample.turns[0].text


def test_qa_suffix_for_bare_answers():
    bare = GroundedCaption("s", "the table", (PhraseCorrespondence(0, 9, (1,)),),
                           {"question": "What is the cup standing on?"})
    sample = convert_task(bare, "qa", LIB, True, 0)
    q = sample.turns[0].text
    assert q.endswith(GROUNDING_SUFFIX)
    middle = q[: -len(GROUNDING_SUFFIX) - 1]
    assert any(middle.endswith(s) for s in LIB[TaskKind.QA].suffixes)
    sentence = GroundedCaption("s", "It rests on the table.", (PhraseCorrespondence(16, 21, (1,)),),
                               {"question": "What is the cup standing on?"})
    q2 = convert_task(sentence, "qa", LIB, False, 0).turns[0].text
    assert not any(q2.endswith(s) for s in LIB[TaskKind.QA].suffixes)


def test_conversion_is_deterministic_and_seeded():
    cap = caption_from_markup("s", "A [sofa 1] faces the [table 2].")
    a = [convert_task(cap, "scene_captioning", LIB, False, s).to_json() for s in range(20)]
    b = [convert_task(cap, "scene_captioning", LIB, False, s).to_json() for s in range(20)]
    assert a == b
    assert len({json.dumps(x) for x in a}) > 1


def test_embodied_fallbacks_convert_cleanly():
    cap = caption_from_markup("s", "A [sofa 1] faces the [low table 2] near a [lamp 3].")
    dia = embodied_dialogue_caption(cap, FALLBACK)
    sample = convert_task(dia, "embodied_dialogue", LIB, False, 0)
    assert [t.role for t in sample.turns] == ["user", "assistant"] * 3
    assert sample.turns[-1].text == "It is right here, the <p> low table </p> <ref>."
    assert sample.ids == {1, 2}
    plan = embodied_plan_caption(cap, FALLBACK)
    assert plan.provenance["instruction"] == "Go and inspect the [sofa 1]."
    assert plan.provenance["plan"].splitlines() == [
        "1. Walk over to the [sofa 1].",
        "2. Check the [low table 2] on the way.",
        "3. Check the [lamp 3] on the way.",
        "4. Return and report what you found.",
    ]
    sample = convert_task(plan, "embodied_planning", LIB, False, 0)
    assert sample.ids == {1, 2, 3}
    assert not sample_violations(sample)


def test_embodied_rejects_foreign_ids():
    cap = caption_from_markup("s", "A [sofa 1].")

    class Fixed:
        def complete(self, spec, bindings, fallback=None):
            return "Human: Where is the [piano 9]?\nRobot: Over there."

    with pytest.raises(ConversionError):
        embodied_dialogue_caption(cap, Fixed())


def test_parse_dialogue_roles():
    text = "Robot: hello\nHuman: hi\nmore words\nUser: again\nAssistant: ok"
    assert parse_dialogue(text) == [
        {"role": "user", "markup": "hi more words again"},
        {"role": "assistant", "markup": "ok"},
    ]


def test_join_and_embed():
    assert join_phrases([]) == ""
    assert join_phrases(["a"]) == "a"
    assert join_phrases(["a", "b", "c"]) == "a, b and c"
    cap = caption_from_markup("s", "The [cup 1] on a [desk 2].")
    assert embed_referents(cap.text, cap.correspondences) == "The <p> cup </p> <ref> on a <p> desk </p> <ref>."


def test_derive_referents_counts_must_agree():
    cap = caption_from_markup("s", "The [cup 1].")
    with pytest.raises(ConversionError):
        derive_referent_correspondence(cap, "no tokens here")


def test_violations_detected():
    def bad(turns, refs=()):
        with pytest.raises(ConversionError):
            InstructionSample("s", "qa", turns, refs)

    bad((Turn("assistant", "x"),))
    bad((Turn("user", "<p> x </p> <ref>"),))  # missing annotation
    bad((Turn("user", "<p> x <ref>"),), (ReferentAnnotation(0, 0, (1,)),))
    bad((Turn("user", "<p> x </p> y <ref>"),), (ReferentAnnotation(0, 0, (1,)),))
    bad((Turn("user", "x"),), (ReferentAnnotation(3, 0, (1,)),))


def test_one_to_one_grouping():
    anns = [ReferentAnnotation(1, 0, (3, 4)), ReferentAnnotation(1, 1, (5,))]
    assert [(r.token_position, r.ids) for r in group_referents(anns, "one_to_one")] == [(0, (3,)), (1, (4,)), (2, (5,))]
    cap = caption_from_markup("s", "The [chairs 3 4] and the [desk 5].")
    s = convert_task(cap, "scene_captioning", LIB, False, 0)
    split = regroup_sample(s, "one_to_one")
    assert "<p> chairs </p> <ref> <ref> and" in split.turns[1].text
    assert [r.ids for r in split.referents] == [(3,), (4,), (5,)]
    with pytest.raises(ValueError):
        group_referents(anns, "sideways")


def test_task_inputs_from_synthetic_caption():
    cap = caption_from_markup("s", "A [cup 2] sits on the [table 1]. The [cup 2] is white.")
    cap = GroundedCaption(cap.scene_id, cap.text, cap.correspondences,
                          {"selection": {"anchor": 2}, "relations": [{"kind": "supported_by", "target": 2, "anchors": [1]}]})
    got = dict(task_inputs(cap, {1: "table", 2: "cup"}, [t.value for t in TaskKind]))
    assert set(got) == {TaskKind.SCENE_CAPTIONING, TaskKind.MULTI_GROUNDING, TaskKind.SINGLE_GROUNDING,
                        TaskKind.DENSE_CAPTIONING, TaskKind.QA}
    assert len(got[TaskKind.MULTI_GROUNDING].correspondences) == 2
    assert got[TaskKind.QA].text == "the table"
    assert got[TaskKind.QA].provenance["question"] == "What is the cup standing on?"
    for task, c in got.items():
        assert not sample_violations(convert_task(c, task, LIB, True, 3))


def test_detection_inputs_includes_absent():
    caps = detection_inputs("s", {1: "chair", 2: "chair", 3: "desk"}, ["piano"])
    assert [(c.text, sorted(c.ids)) for c in caps] == [("chair", [1, 2]), ("desk", [3]), ("piano", [])]


@given(grounded_captions(), st.integers(0, 1000), st.booleans())
def test_scene_captioning_integrity(cap, seed, grounding):
    sample = convert_task(cap, "scene_captioning", LIB, grounding, seed)
    assert not sample_violations(sample)
    assert sample.turns[1].text.count(REF) == len(cap.correspondences)
    assert [r.ids for r in sample.referents] == [c.ids for c in sorted(cap.correspondences, key=lambda c: (c.start, c.end))]
    for r in sample.referents:
        s, e = r.phrase_span
        assert sample.turns[1].text[e:e + 11] == " </p> <ref>"


@given(instruction_samples())
def test_sample_json_round_trip(sample):
    assert InstructionSample.from_json(json.loads(json.dumps(sample.to_json()))) == sample
