import json

import pytest

from formssl.checkpoint import load_checkpoint
from formssl.cli import COMMANDS, main
from formssl.config import config_hash, load_config
from formssl.errordet import load_predictions

DESK = """
seed = 7
deterministic = true

[synth]
n_videos = 20
image_size = 64

[triplets]
max_triplets = 100
num_frames = 8

[cvcspc]
encoder = "tiny"
image_size = 64
resize = 64
epochs = 1

[md]
encoder = "tiny"
image_size = 64
resize = 64
epochs = 1
embedding_dim = 16

[pad]
encoder = "tiny"
image_size = 64
resize = 64
epochs = 1
appearance_dim = 64

[features]
target_frames = 32

[detector]
epochs = 3
channels = 16

[static]
epochs = 1
frames_per_video = 2
"""

PIPELINE = ("synth", "extract-traj", "mine-triplets", "pretrain-cvcspc", "pretrain-md", "pretrain-pad",
            "extract-features", "train-detector", "evaluate", "finetune-static", "visualize")


def run_cli(cfg, out, *args):
    return main([args[0], "--config", str(cfg), "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "desk.toml"
    cfg.write_text(DESK)
    out = root / "run"
    for cmd in PIPELINE:
        assert run_cli(cfg, out, cmd) == 0, cmd
    return cfg, out


def test_pipeline_artifacts(run_dir):
    cfg, out = run_dir
    expected = [
        "corpus/manifest.jsonl", "corpus/detections.jsonl", "trajectory/trajectories.jsonl",
        "trajectory/half_cycles.jsonl", "trajectory/repetitions.jsonl", "trajectory/diagnostics.json",
        "splits.csv", "triplets/pose_cvcspc.jsonl", "triplets/clips.jsonl", "triplets/report.json",
        "checkpoints/cvcspc.ckpt", "checkpoints/md.ckpt", "checkpoints/pad.ckpt",
        "features/cvcspc/index.jsonl", "detector/cvcspc/detector.ckpt", "detector/cvcspc/predictions.csv",
        "detector/cvcspc/metrics.json", "static/cvcspc/predictions.csv", "config.json",
    ]
    for rel in expected:
        assert (out / rel).is_file(), rel
    assert list((out / "visualize").glob("*.png"))


def test_artifacts_carry_config_hash(run_dir):
    cfg, out = run_dir
    h = config_hash(load_config(str(cfg), [f"out={json.dumps(str(out))}"]))
    assert json.loads((out / "config.json").read_text())["config_hash"] == h
    for rel in ("corpus/manifest.jsonl", "trajectory/trajectories.jsonl", "splits.csv",
                "detector/cvcspc/predictions.csv", "checkpoints/cvcspc_log.csv"):
        assert json.loads((out / f"{rel}.meta.json").read_text())["config_hash"] == h, rel
    for rel in ("triplets/report.json", "detector/cvcspc/metrics.json", "trajectory/diagnostics.json"):
        assert json.loads((out / rel).read_text())["config_hash"] == h, rel
    assert json.loads((out / "triplets/pose_cvcspc.jsonl").read_text().splitlines()[0])["config_hash"] == h
    for name in ("cvcspc", "md", "pad"):
        assert load_checkpoint(out / "checkpoints" / f"{name}.ckpt").config["config_hash"] == h


def test_metrics_json_contents(run_dir):
    _, out = run_dir
    m = json.loads((out / "detector/cvcspc/metrics.json").read_text())
    assert {"f1", "precision", "recall", "tp", "fp", "fn", "tn", "threshold", "warnings"} <= set(m)
    assert m["tp"] + m["fp"] + m["fn"] + m["tn"] == m["n"] == len(load_predictions(out / "detector/cvcspc/predictions.csv"))


def test_mining_uses_train_split_only(run_dir):
    _, out = run_dir
    split = dict(line.split(",") for line in (out / "splits.csv").read_text().splitlines()[1:])
    for line in (out / "triplets/pose_cvcspc.jsonl").read_text().splitlines():
        row = json.loads(line)
        assert all(split[row[leg]["video_id"]] == "train" for leg in ("anchor", "positive", "negative"))


def test_ensemble_command(run_dir, capsys):
    cfg, out = run_dir
    assert run_cli(cfg, out, "ensemble", "--a", "cvcspc", "--b", str(out / "static/cvcspc/predictions.csv")) == 0
    ens = load_predictions(out / "ensemble/predictions.csv")
    a = {p.video_id: p.probability for p in load_predictions(out / "detector/cvcspc/predictions.csv")}
    b = {p.video_id: p.probability for p in load_predictions(out / "static/cvcspc/predictions.csv")}
    for p in ens:
        assert p.probability == pytest.approx((a[p.video_id] + b[p.video_id]) / 2)


def test_evaluate_prints_f1(run_dir, capsys):
    cfg, out = run_dir
    assert run_cli(cfg, out, "evaluate", "--metrics", str(out / "m2.json")) == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["f1"] == json.loads((out / "m2.json").read_text())["f1"]


def test_shuffled_control_writes_separate_outputs(run_dir):
    cfg, out = run_dir
    assert run_cli(cfg, out, "train-detector", "--set", "detector.shuffle_labels=true") == 0
    assert (out / "detector/cvcspc_shuffled/predictions.csv").is_file()


def test_unknown_command(tmp_path, capsys):
    assert main(["frobnicate", "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "UnknownCommand" and "frobnicate" in err["detail"]


def test_invalid_config_exit(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "synth.n_videos=0"]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigInvalid" and "synth.n_videos" in err["detail"]


def test_evaluate_empty_predictions(tmp_path, capsys):
    p = tmp_path / "empty.csv"
    p.write_text("video_id,error_type,probability,label\n")
    assert main(["evaluate", "--out", str(tmp_path / "run"), "--predictions", str(p)]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "EmptyPredictions"


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert main(["extract-traj", "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "MissingFile"


def test_wrong_checkpoint_kind(run_dir, capsys):
    cfg, out = run_dir
    assert run_cli(cfg, out, "extract-features", "--set", "features.checkpoint=md") == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "WrongCheckpointKind"


def test_command_list_is_complete():
    assert set(COMMANDS) >= set(PIPELINE) | {"ensemble"}
