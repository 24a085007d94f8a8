import copy
import hashlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from formssl import config as C
from formssl.errors import ConfigInvalid, MissingFile


def test_defaults_validate():
    cfg = C.load_config()
    assert cfg == C.validate(copy.deepcopy(C.DEFAULTS))
    assert cfg["triplets"]["delta"] == 30.0 and cfg["cvcspc"]["lr"] == 1e-4
    assert cfg["md"]["epochs"] == 20 and cfg["md"]["batch_size"] == 5
    assert cfg["pad"]["epochs"] == 500 and cfg["pad"]["pose_dim"] == 32


def test_toml_file_merges_over_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 3\n[synth]\nn_videos = 12\n[cvcspc]\nencoder = "tiny"\n')
    cfg = C.load_config(str(p))
    assert cfg["seed"] == 3 and cfg["synth"]["n_videos"] == 12 and cfg["synth"]["image_size"] == 128
    assert cfg["cvcspc"]["encoder"] == "tiny"


@pytest.mark.parametrize("item, path, value", [
    ("seed=4", ["seed"], 4), ("cvcspc.lr=5e-4", ["cvcspc", "lr"], 5e-4),
    ("cvcspc.encoder=tiny", ["cvcspc", "encoder"], "tiny"), ('md.encoder="tiny"', ["md", "encoder"], "tiny"),
    ("splits.fractions=[0.8, 0.1, 0.1]", ["splits", "fractions"], [0.8, 0.1, 0.1]),
    ("deterministic=true", ["deterministic"], True),
])
def test_parse_override(item, path, value):
    assert C.parse_override(item) == (path, value)


def test_overrides_applied_last(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 3\n")
    assert C.load_config(str(p), ["seed=9"])["seed"] == 9


@pytest.mark.parametrize("overrides, path", [
    (["cvcspc.lr=-1"], "cvcspc.lr"),
    (["cvcspc.bogus=1"], "cvcspc.bogus"),
    (["triplets.mode=sideways"], "triplets.mode"),
    (["synth.period_min=50"], "synth.period_min"),
    (["splits.fractions=[0.5, 0.2, 0.2]"], "splits.fractions"),
    (["triplets.delta=4"], "triplets.delta"),
    (["pad.appearance_dim=16"], "pad.appearance_dim"),
    (["nosection.key=1"], "nosection.key"),
    (["seed"], "seed"),
])
def test_invalid_configs_name_the_key(overrides, path):
    with pytest.raises(ConfigInvalid) as exc:
        C.load_config(None, overrides)
    assert exc.value.path == path


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(MissingFile):
        C.load_config(str(tmp_path / "none.toml"))
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n")
    with pytest.raises(ConfigInvalid):
        C.load_config(str(bad))


def test_schema_is_closed():
    assert C.SCHEMA["additionalProperties"] is False
    assert all(s.get("additionalProperties") is False for s in C.SCHEMA["properties"].values()
               if s.get("type") == "object")


def test_hash_ignores_location_and_workers():
    a = C.load_config(None, ["out=\"x\"", "jobs=1"])
    b = C.load_config(None, ["out=\"y\"", "jobs=4"])
    assert C.config_hash(a) == C.config_hash(b)
    assert C.config_hash(a) != C.config_hash(C.load_config(None, ["seed=1"]))


def test_hash_is_sha256_of_canonical_json():
    cfg = C.load_config()
    body = {k: v for k, v in cfg.items() if k not in ("out", "jobs")}
    assert C.config_hash(cfg) == hashlib.sha256(C.canonical_json(body).encode()).hexdigest()
    assert C.canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def stage_seed_reference(seed, stage):
    d = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return (d[0] | d[1] << 8 | d[2] << 16 | d[3] << 24) & 0x7FFFFFFF


@given(st.integers(0, 2**40), st.text(min_size=1, max_size=20))
def test_stage_seed_reference(seed, stage):
    assert C.stage_seed(seed, stage) == stage_seed_reference(seed, stage)
    assert 0 <= C.stage_seed(seed, stage) < 2**31


def test_stage_seeds_differ_per_stage():
    assert len({C.stage_seed(0, s) for s in ("synth", "split", "mine-pose", "mine-clips")}) == 4
