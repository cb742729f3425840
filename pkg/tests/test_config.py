import json

import pytest

from grounded3d.config import Config


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = Config()
    assert cfg.radius == 2.0 and cfg.max_objects == 15 and cfg.word_cap == 256
    assert cfg.keep_prob == (0.6, 0.9)
    assert cfg.thresholds == (0.25, 0.5)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_json(documented=True)))
    assert Config.load(path) == cfg


def test_documented_output_covers_every_key():
    d = Config().to_json(documented=True)
    assert set(d["_doc"]) == set(d) - {"_doc"}


@pytest.mark.parametrize("bad", [
    {"radius": 0}, {"keep_prob": [0.9, 0.6]}, {"focal_alpha": 1.5}, {"thresholds": []},
    {"referent_mode": "many"}, {"jobs": 0}, {"grounding_rate": -0.1},
])
def test_invalid_values(bad):
    with pytest.raises(ValueError):
        Config.from_json(bad)


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="radiuss"):
        Config.from_json({"radiuss": 1.0})


def test_overrides_skip_none():
    cfg = Config(seed=3).with_overrides(seed=None, radius=1.5)
    assert cfg.seed == 3 and cfg.radius == 1.5
    with pytest.raises(ValueError):
        Config().with_overrides(word_cap=0)
