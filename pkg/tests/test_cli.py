import json

import pytest

from grounded3d.cli import main, plain_text
from grounded3d.markup import read_captions
from grounded3d.scene import save_scene
from grounded3d.synthetic import make_scenes


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    scenes = root / "scenes"
    scenes.mkdir()
    for s in make_scenes(6, seed=4):
        save_scene(s, scenes / f"{s.scene_id}.json")
    caps, samples = root / "captions.jsonl", root / "samples.jsonl"
    assert main(["generate", "--scenes", str(scenes), "--seed", "1", "-o", str(caps)]) == 0
    assert main(["convert", str(caps), "--scenes", str(scenes), "--seed", "1", "-o", str(samples)]) == 0
    return root, scenes, caps, samples


def test_generate_and_convert_are_deterministic(corpus, tmp_path):
    root, scenes, caps, samples = corpus
    again_caps, again_samples = tmp_path / "c.jsonl", tmp_path / "s.jsonl"
    assert main(["generate", "--scenes", str(scenes), "--seed", "1", "--jobs", "3", "-o", str(again_caps)]) == 0
    assert main(["convert", str(again_caps), "--scenes", str(scenes), "--seed", "1", "-o", str(again_samples)]) == 0
    assert again_caps.read_bytes() == caps.read_bytes()
    assert again_samples.read_bytes() == samples.read_bytes()
    assert read_captions(caps)


def test_eval_self_is_perfect(corpus, capsys):
    root, scenes, caps, samples = corpus
    assert main(["eval", "--self", "--scenes", str(scenes), "--samples", str(samples)]) == 0
    report = json.loads(capsys.readouterr().out)
    for name, v in report["metrics"].items():
        assert v == pytest.approx(10.0 if name.startswith("C@") else 1.0), name


def test_check_passes_on_corpus(corpus, capsys):
    root, scenes, caps, samples = corpus
    code = main(["check", "--scenes", str(scenes), "--captions", str(caps), "--samples", str(samples)])
    out = capsys.readouterr().out
    assert code == 0, out
    assert all(line.startswith("PASS") for line in out.splitlines())


def test_stats_on_empty_file(tmp_path, capsys):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert main(["stats", str(empty)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["texts"] == 0 and stats["correspondences"] == 0


def test_replay_miss_names_the_hash(corpus, tmp_path, capsys):
    root, scenes, caps, samples = corpus
    code = main(["generate", "--scenes", str(scenes), "--seed", "1", "--replay", "--cache", str(tmp_path / "cache")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("grounded3d generate:")
    assert any(len(w.strip(".,:'\"()")) == 64 for w in err.split())


def test_generate_requires_seed(corpus, capsys):
    _, scenes, _, _ = corpus
    assert main(["generate", "--scenes", str(scenes)]) == 1
    assert "--seed" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["stats", "--bogus", "x"])
    assert exc.value.code == 2


def test_eval_from_files(tmp_path, capsys):
    box = [[0, 0, 0], [1, 1, 1]]
    (tmp_path / "gt.jsonl").write_text(json.dumps({"query_id": "q", "boxes": [box]}) + "\n")
    (tmp_path / "pred.jsonl").write_text(json.dumps({"query_id": "q", "boxes": [box], "scores": [0.7]}) + "\n")
    code = main(["eval", "--kind", "grounding", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "pred.jsonl")])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["metrics"] == {"Acc@0.25": 1.0, "Acc@0.5": 1.0}


def test_eval_rejects_malformed_box(tmp_path, capsys):
    (tmp_path / "gt.jsonl").write_text(json.dumps({"query_id": "q", "boxes": [{"min": [0, 0, 0]}]}) + "\n")
    (tmp_path / "pred.jsonl").write_text("")
    code = main(["eval", "--kind", "grounding", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "pred.jsonl")])
    assert code == 1
    assert "a box is" in capsys.readouterr().err


def test_plain_text():
    assert plain_text("The <p> red chair </p> <ref> <ref> and <ref> here.") == "The red chair and here."
