import pytest
from hypothesis import given

from grounded3d.markup import (
    GroundedCaption,
    MarkupError,
    PhraseCorrespondence,
    dumps_jsonl,
    loads_jsonl,
    markup_from_parts,
    parse_grounded_markup,
    serialize_grounded_markup,
)

from strategies import grounded_captions


def test_bracket_format_example():
    text, corrs = parse_grounded_markup("the [white nightstand 12] here")
    assert text == "the white nightstand here"
    assert [(c.phrase(text), c.ids) for c in corrs] == [("white nightstand", (12,))]


def test_multi_id_bracket():
    text, corrs = parse_grounded_markup("[two brown chairs 3 7]")
    assert text == "two brown chairs"
    assert corrs[0].ids == (3, 7)
    assert corrs[0].span == (0, 16)


def test_number_inside_phrase():
    text, corrs = parse_grounded_markup("see [2 lamps by the bed 4 5].")
    assert text == "see 2 lamps by the bed."
    assert corrs[0].ids == (4, 5)


def test_plain_text_is_identity():
    assert parse_grounded_markup("nothing to see") == ("nothing to see", [])


@pytest.mark.parametrize("raw, offset", [
    ("a ] b", 2),
    ("a [chair 3", 2),
    ("a [chair [3]]", 9),
    ("a [chair] b", 2),
    ("a [3 4] b", 2),
])
def test_parse_errors_carry_offset(raw, offset):
    with pytest.raises(MarkupError) as err:
        parse_grounded_markup(raw)
    assert err.value.offset == offset


def test_adjacent_brackets_stay_apart():
    cap = GroundedCaption("s", "redchair", (PhraseCorrespondence(0, 3, (1,)), PhraseCorrespondence(3, 8, (2,))))
    raw = serialize_grounded_markup(cap)
    assert raw == "[red 1][chair 2]"
    text, corrs = parse_grounded_markup(raw)
    assert text == cap.text and tuple(corrs) == cap.correspondences


def test_serialize_rejects_brackets_and_trailing_numbers():
    with pytest.raises(ValueError):
        markup_from_parts("a [x] b", [])
    with pytest.raises(ValueError):
        markup_from_parts("room 12 here", [PhraseCorrespondence(0, 7, (1,))])


def test_caption_invariants():
    with pytest.raises(ValueError):
        GroundedCaption("s", "abc", (PhraseCorrespondence(0, 2, (1,)), PhraseCorrespondence(1, 3, (2,))))
    with pytest.raises(ValueError):
        GroundedCaption("s", "abc", (PhraseCorrespondence(0, 5, (1,)),))
    with pytest.raises(ValueError):
        PhraseCorrespondence(0, 1, ())
    shuffled = GroundedCaption("s", "ab cd", (PhraseCorrespondence(3, 5, (2,)), PhraseCorrespondence(0, 2, (1,))))
    assert [c.start for c in shuffled.correspondences] == [0, 3]


@given(grounded_captions())
def test_parse_inverts_serialize(cap):
    text, corrs = parse_grounded_markup(serialize_grounded_markup(cap))
    assert text == cap.text
    assert tuple(corrs) == cap.correspondences


@given(grounded_captions())
def test_serialize_inverts_parse_on_canonical_markup(cap):
    raw = serialize_grounded_markup(cap)
    text, corrs = parse_grounded_markup(raw)
    assert markup_from_parts(text, corrs) == raw


@given(grounded_captions())
def test_jsonl_round_trip(cap):
    (back,) = [GroundedCaption.from_json(d) for d in loads_jsonl(dumps_jsonl([cap]))]
    assert back == cap
