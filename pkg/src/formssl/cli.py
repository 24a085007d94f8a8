"""Command-line pipeline.

Every command works inside one run directory (``--out``, default from the
config) with a fixed layout::

    corpus/        manifest.jsonl, detections.jsonl, frames/, gt/   (synth)
    trajectory/    trajectories.jsonl, half_cycles.jsonl, repetitions.jsonl, diagnostics.json
    splits.csv     video_id,split
    triplets/      pose_<mode>.jsonl, clips.jsonl, report.json
    checkpoints/   <task>.ckpt, <task>_log.csv
    features/<checkpoint>/         <video_id>.npy, index.jsonl
    detector/<features>/           detector.ckpt, log.csv, predictions.csv, val_predictions.csv
    static/<checkpoint>/           same files as detector/
    ensemble/      predictions.csv
    visualize/     <checkpoint>_<video_id>_<frame>.png

Artifacts without an embedded stamp get a ``<file>.meta.json`` sidecar with
the config hash and seeds. Failures print ``{"error": name, "detail": msg}``
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import errordet as ed
from . import ingest, pretext, synthgen, trajectory, triplets
from .checkpoint import load_checkpoint, save_checkpoint, write_log_csv
from .config import config_hash, load_config, stage_seed
from .errors import FormSSLError, MissingClass, MissingFile, UnknownCommand, WrongCheckpointKind

log = logging.getLogger("formssl")

COMMANDS = ("synth", "extract-traj", "mine-triplets", "pretrain-cvcspc", "pretrain-md", "pretrain-pad",
            "extract-features", "train-detector", "finetune-static", "evaluate", "ensemble", "visualize")


class Run:
    """Resolved config plus run-directory helpers for one command."""

    def __init__(self, config: dict, command: str, corpus=None):
        self.config = config
        self.command = command
        self.out = Path(config["out"])
        self.corpus = Path(corpus) if corpus else self.out / "corpus"
        self.hash = config_hash(config)
        self.seed = config["seed"]
        self.deterministic = config["deterministic"]

    def relative(self, path: Path) -> str:
        """``path`` relative to the run directory when it lies inside it."""
        try:
            return Path(path).resolve().relative_to(self.out.resolve()).as_posix()
        except ValueError:
            return str(path)

    def seed_for(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def stamp(self, artifact: Path, stage: str, **extra) -> None:
        meta = {"config_hash": self.hash, "seed": self.seed, "stage_seed": self.seed_for(stage),
                "command": self.command, "code_version": __version__, **extra}
        Path(f"{artifact}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    # ---- shared inputs
    def manifest(self):
        return ingest.load_manifest(self.corpus / "manifest.jsonl")

    def store(self, size: int, resize=None):
        videos, _ = self.manifest()
        return ingest.FrameStore(videos, size=size, resize=resize, root=self.corpus)

    def splits(self) -> dict:
        """Load ``splits.csv``, creating it from the manifest labels on first use."""
        path = self.out / "splits.csv"
        if not path.is_file():
            _, labels = self.manifest()
            cfg = self.config["splits"]
            assignment = ingest.split_dataset(labels, tuple(cfg["fractions"]), self.seed_for("split"),
                                              cfg["stratify"])
            ingest.write_splits(self.path("splits.csv"), assignment)
            self.stamp(path, "split")
        return {s.video_id: s.split for s in ingest.load_splits(path)}

    def checkpoint_path(self, ref: str) -> Path:
        """A checkpoint name (``cvcspc``) maps to ``checkpoints/<name>.ckpt``; anything else is a path."""
        if ref.endswith(".ckpt") or "/" in ref:
            return Path(ref)
        return self.out / "checkpoints" / f"{ref}.ckpt"

    def save_checkpoint(self, ckpt, path: Path, log_path: Path, stage: str):
        ckpt.config["config_hash"] = self.hash
        save_checkpoint(ckpt, path)
        write_log_csv(log_path, ckpt.log)
        self.stamp(log_path, stage)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _labels_for(labels, error_type: str) -> dict:
    types = sorted({l.error_type for l in labels})
    if not error_type:
        if len(types) != 1:
            raise MissingClass(f"several error types {types}; set error_type in the config")
        error_type = types[0]
    out = {l.video_id: l.label for l in labels if l.error_type == error_type}
    if not out:
        raise MissingClass(f"no labels for error type {error_type!r}")
    return error_type, out


# ----------------------------------------------------------------- commands

def cmd_synth(run: Run) -> list:
    s = run.config["synth"]
    template = synthgen.SynthParams(
        image_size=s["image_size"], repetitions=s["repetitions"], amplitude=s["amplitude"],
        detection_noise_sigma=s["noise_sigma"],
        error=synthgen.ErrorSpec(phase_window=s["phase_window"], max_offset=s["max_offset"]))
    presets = None
    if s["appearance_presets"]:
        rng = np.random.default_rng(run.seed_for("synth-appearance"))
        presets = tuple(synthgen.random_appearance(rng, template.appearance) for _ in range(s["appearance_presets"]))
    variation = synthgen.CorpusVariation(period=(s["period_min"], s["period_max"]),
                                         magnitude=(s["magnitude_min"], s["magnitude_max"]),
                                         appearance_presets=presets)
    manifest, videos, _ = synthgen.generate_corpus(run.corpus, s["n_videos"], template, variation,
                                                   run.seed_for("synth"), s["error_ratio"], s["error_type"],
                                                   jobs=run.config["jobs"])
    for name in ("manifest.jsonl", "detections.jsonl"):
        run.stamp(run.corpus / name, "synth")
    return [str(manifest), str(run.corpus / "detections.jsonl")]


def cmd_extract_traj(run: Run) -> list:
    c = run.config["trajectory"]
    videos, _ = run.manifest()
    streams = ingest.load_detections(run.corpus / "detections.jsonl")
    trajs, halves, reps, diag = [], [], [], {}
    for v in videos:
        if v.video_id not in streams:
            raise MissingFile(f"no detections for {v.video_id}")
        tr, hc, rp = trajectory.extract_trajectory(streams[v.video_id], c["window"], c["max_gap"], c["hysteresis"],
                                                   c["epsilon_range"], c["per_repetition"], c["bottom"])
        trajs.append(tr)
        halves += hc
        reps += rp
        diag[v.video_id] = {"half_cycles": len(hc), "repetitions": len(rp),
                            "parabola_rmse": [trajectory.parabola_fit_rmse(tr.phase, h) for h in hc]}
    out = [run.path("trajectory", "trajectories.jsonl"), run.path("trajectory", "half_cycles.jsonl"),
           run.path("trajectory", "repetitions.jsonl"), run.path("trajectory", "diagnostics.json")]
    trajectory.write_trajectories(out[0], trajs)
    trajectory.write_half_cycles(out[1], halves)
    trajectory.write_repetitions(out[2], reps)
    _write_json(out[3], {"config_hash": run.hash, "seed": run.seed, "videos": diag})
    for p in out[:3]:
        run.stamp(p, "extract-traj")
    return [str(p) for p in out]


def cmd_mine_triplets(run: Run) -> list:
    c = run.config["triplets"]
    split = run.splits()
    trajs = [t for t in trajectory.load_trajectories(run.out / "trajectory" / "trajectories.jsonl")
             if split.get(t.video_id) == "train"]
    reps = [r for r in trajectory.load_repetitions(run.out / "trajectory" / "repetitions.jsonl")
            if split.get(r.video_id) == "train"]
    report = {}
    pose = triplets.mine_pose_triplets(trajs, c["delta"], c["epsilon_pos"], c["mode"], c["per_anchor"],
                                       run.seed_for("mine-pose"), c["anchor_stride"], c["cross_video_negatives"],
                                       report)
    if c["max_triplets"] and len(pose) > c["max_triplets"]:
        rng = np.random.default_rng(run.seed_for("mine-subsample"))
        keep = np.sort(rng.choice(len(pose), size=c["max_triplets"], replace=False))
        pose = [pose[i] for i in keep]
    report["kept"] = len(pose)
    clips = triplets.build_md_triplets(reps, c["num_frames"], run.seed_for("mine-clips"))
    report["clip_triplets"] = len(clips)
    pose_path = run.path("triplets", f"pose_{c['mode']}.jsonl")
    clip_path = run.path("triplets", "clips.jsonl")
    triplets.write_pose_triplets(pose_path, pose, run.hash)
    triplets.write_clip_triplets(clip_path, clips, run.hash)
    report_path = run.path("triplets", "report.json")
    _write_json(report_path, {"config_hash": run.hash, "seed": run.seed, **report})
    return [str(pose_path), str(clip_path), str(report_path)]


def _train_config(run: Run, task: str, section: str, stage: str) -> pretext.TrainConfig:
    c = dict(run.config[section])
    c.pop("resize", None)
    c["init_weights"] = c.get("init_weights") or None
    return pretext.TrainConfig.for_task(task, **c, seed=run.seed_for(stage), deterministic=run.deterministic)


def cmd_pretrain_cvcspc(run: Run) -> list:
    mode = run.config["triplets"]["mode"]
    task = "cvcspc" if mode == "cvcspc" else "vanilla_pc"
    data = triplets.load_pose_triplets(run.out / "triplets" / f"pose_{mode}.jsonl")
    cfg = _train_config(run, task, "cvcspc", f"pretrain-{task}")
    store = run.store(cfg.image_size, run.config["cvcspc"]["resize"])
    ckpt = pretext.train_cvcspc(data, store, cfg)
    ckpt.config["resize"] = run.config["cvcspc"]["resize"]
    path, log_path = run.path("checkpoints", f"{task}.ckpt"), run.path("checkpoints", f"{task}_log.csv")
    run.save_checkpoint(ckpt, path, log_path, f"pretrain-{task}")
    return [str(path), str(log_path)]


def cmd_pretrain_md(run: Run) -> list:
    data = triplets.load_clip_triplets(run.out / "triplets" / "clips.jsonl")
    cfg = _train_config(run, "md", "md", "pretrain-md")
    cfg.num_frames = run.config["triplets"]["num_frames"]
    store = run.store(cfg.image_size, run.config["md"]["resize"])
    ckpt = pretext.train_md(data, store, cfg)
    ckpt.config["resize"] = run.config["md"]["resize"]
    path, log_path = run.path("checkpoints", "md.ckpt"), run.path("checkpoints", "md_log.csv")
    run.save_checkpoint(ckpt, path, log_path, "pretrain-md")
    return [str(path), str(log_path)]


def cmd_pretrain_pad(run: Run) -> list:
    split = run.splits()
    videos, _ = run.manifest()
    train = [v for v in videos if split.get(v.video_id) == "train"]
    cfg = _train_config(run, "pad", "pad", "pretrain-pad")
    store = run.store(cfg.image_size, run.config["pad"]["resize"])
    ckpt = pretext.train_pad([v.video_id for v in train], store, cfg, [v.frame_count for v in train])
    ckpt.config["resize"] = run.config["pad"]["resize"]
    path, log_path = run.path("checkpoints", "pad.ckpt"), run.path("checkpoints", "pad_log.csv")
    run.save_checkpoint(ckpt, path, log_path, "pretrain-pad")
    return [str(path), str(log_path)]


def cmd_extract_features(run: Run) -> list:
    c = run.config["features"]
    ckpt = load_checkpoint(run.checkpoint_path(c["checkpoint"]))
    if ckpt.task not in ed.IMAGE_TASKS:
        raise WrongCheckpointKind(f"features need an image-encoder checkpoint, got {ckpt.task!r}")
    model = pretext.load_model(ckpt)
    store = run.store(ckpt.config["image_size"], ckpt.config.get("resize"))
    videos, _ = run.manifest()
    seqs = [ed.extract_features(ckpt, v, store, c["target_frames"], c["mode"], model=model) for v in videos]
    out_dir = run.out / "features" / Path(c["checkpoint"]).stem
    ed.write_features(out_dir, seqs)
    run.stamp(out_dir / "index.jsonl", "extract-features", checkpoint=ckpt.task)
    return [str(out_dir)]


def _write_predictions(run: Run, path: Path, preds, stage: str, threshold: float):
    ed.write_predictions(path, preds)
    run.stamp(path, stage, threshold=threshold)


def cmd_train_detector(run: Run) -> list:
    c = run.config["detector"]
    feats = ed.load_features(run.out / "features" / c["features"])
    _, labels = run.manifest()
    error_type, lab = _labels_for(labels, c["error_type"])
    split = run.splits()
    ids = {s: sorted(v for v in lab if split.get(v) == s and v in feats) for s in ("train", "val", "test")}
    if c["shuffle_labels"]:
        # label-permutation control: train and val labels are shuffled among themselves
        pool = ids["train"] + ids["val"]
        perm = np.random.default_rng(run.seed_for("shuffle-labels")).permutation(len(pool))
        lab = {**lab, **{v: lab[pool[j]] for v, j in zip(pool, perm)}}
    dcfg = ed.DetectorConfig.from_dict({**c, "seed": run.seed_for("train-detector"),
                                        "deterministic": run.deterministic})
    ckpt = ed.train_temporal_head([feats[v] for v in ids["train"]], [lab[v] for v in ids["train"]],
                                  [feats[v] for v in ids["val"]], [lab[v] for v in ids["val"]], dcfg)
    name = c["features"] + ("_shuffled" if c["shuffle_labels"] else "")
    out = run.out / "detector" / name
    ckpt.config["error_type"] = error_type
    run.save_checkpoint(ckpt, run.path("detector", name, "detector.ckpt"), out / "log.csv", "train-detector")
    head = pretext.load_model(ckpt)

    def predict(s):
        probs = ed.predict_proba(head, [feats[v].features for v in ids[s]])
        return [ed.PredictionRecord(v, error_type, float(p), int(lab[v])) for v, p in zip(ids[s], probs)]

    val_preds, test_preds = predict("val"), predict("test")
    threshold = c["threshold"]
    if c["threshold_sweep"] and val_preds:
        threshold = ed.best_threshold(val_preds)
    _write_predictions(run, out / "val_predictions.csv", val_preds, "train-detector", threshold)
    _write_predictions(run, out / "predictions.csv", test_preds, "train-detector", threshold)
    return [str(out / "detector.ckpt"), str(out / "predictions.csv")]


def _static_frames(store, trajs: dict, video_ids, k: int) -> list:
    """The ``k`` lowest-phase frames of each video (the bottom of the movement)."""
    out = []
    for v in video_ids:
        idx = np.sort(np.argsort(trajs[v].phase, kind="stable")[:k])
        out.append(store(v, idx))
    return out


def cmd_finetune_static(run: Run) -> list:
    c = run.config["static"]
    ckpt = load_checkpoint(run.checkpoint_path(c["checkpoint"]))
    _, labels = run.manifest()
    error_type, lab = _labels_for(labels, c["error_type"])
    split = run.splits()
    trajs = {t.video_id: t for t in trajectory.load_trajectories(run.out / "trajectory" / "trajectories.jsonl")}
    ids = {s: sorted(v for v in lab if split.get(v) == s and v in trajs) for s in ("train", "val", "test")}
    store = run.store(ckpt.config["image_size"], ckpt.config.get("resize"))
    k = c["frames_per_video"]
    train_frames = _static_frames(store, trajs, ids["train"], k)
    images = np.concatenate(train_frames) if train_frames else np.zeros((0,))
    ys = np.repeat([lab[v] for v in ids["train"]], [len(f) for f in train_frames])
    dcfg = ed.DetectorConfig.from_dict({**c, "seed": run.seed_for("finetune-static"),
                                        "deterministic": run.deterministic})
    det = ed.finetune_static(ckpt, images, ys, dcfg)
    det.config["error_type"] = error_type
    name = Path(c["checkpoint"]).stem
    out = run.out / "static" / name
    run.save_checkpoint(det, run.path("static", name, "detector.ckpt"), out / "log.csv", "finetune-static")
    model = pretext.load_model(det)

    def predict(s):
        frames = _static_frames(store, trajs, ids[s], k)
        # video probability = mean over its bottom frames
        return [ed.PredictionRecord(v, error_type, float(np.mean(ed.predict_static(model, f))), int(lab[v]))
                for v, f in zip(ids[s], frames)]

    _write_predictions(run, out / "val_predictions.csv", predict("val"), "finetune-static", c["threshold"])
    _write_predictions(run, out / "predictions.csv", predict("test"), "finetune-static", c["threshold"])
    return [str(out / "detector.ckpt"), str(out / "predictions.csv")]


def _threshold_of(path: Path, default: float) -> float:
    meta = Path(f"{path}.meta.json")
    if meta.is_file():
        return float(json.loads(meta.read_text()).get("threshold", default))
    return default


def _predictions_path(run: Run, ref: str) -> Path:
    if ref.endswith(".csv") or "/" in ref:
        return Path(ref)
    return run.out / "detector" / ref / "predictions.csv"


def cmd_evaluate(run: Run, predictions=None, metrics=None) -> list:
    path = Path(predictions) if predictions else _predictions_path(run, run.config["detector"]["features"])
    preds = ed.load_predictions(path)
    threshold = _threshold_of(path, run.config["detector"]["threshold"])
    report = ed.evaluate_f1(preds, threshold, warn=False)
    out = Path(metrics) if metrics else path.with_name("metrics.json")
    ed.write_metrics(out, report, {"config_hash": run.hash, "seed": run.seed, "predictions": run.relative(path),
                                   "n": len(preds)})
    print(json.dumps({"f1": report.f1, "precision": report.precision, "recall": report.recall}))
    return [str(out)]


def cmd_ensemble(run: Run, a=None, b=None) -> list:
    c = run.config["ensemble"]
    pa = _predictions_path(run, a or c["a"])
    pb = _predictions_path(run, b or c["b"])
    preds = ed.ensemble(ed.load_predictions(pa), ed.load_predictions(pb), c["method"])
    out = run.path("ensemble", "predictions.csv")
    threshold = (_threshold_of(pa, run.config["detector"]["threshold"]) +
                 _threshold_of(pb, run.config["detector"]["threshold"])) / 2
    _write_predictions(run, out, preds, "ensemble", threshold)
    return [str(out)]


def cmd_visualize(run: Run) -> list:
    c = run.config["visualize"]
    ckpt = load_checkpoint(run.checkpoint_path(c["checkpoint"]))
    if ckpt.task not in ed.IMAGE_TASKS:
        raise WrongCheckpointKind(f"visualization needs an image encoder, got {ckpt.task!r}")
    model = pretext.load_model(ckpt)
    videos, _ = run.manifest()
    vid = c["video_id"] or videos[0].video_id
    store = run.store(ckpt.config["image_size"], ckpt.config.get("resize"))
    frame = store(vid, [c["frame"]])[0]
    out = run.path("visualize", f"{Path(c['checkpoint']).stem}_{vid}_{c['frame']:05d}.png")
    ed.visualize_features_pca(ed.spatial_features(model, frame), frame, c["alpha"], out)
    run.stamp(out, "visualize")
    return [str(out)]


HANDLERS = {
    "synth": cmd_synth, "extract-traj": cmd_extract_traj, "mine-triplets": cmd_mine_triplets,
    "pretrain-cvcspc": cmd_pretrain_cvcspc, "pretrain-md": cmd_pretrain_md, "pretrain-pad": cmd_pretrain_pad,
    "extract-features": cmd_extract_features, "train-detector": cmd_train_detector,
    "finetune-static": cmd_finetune_static, "evaluate": cmd_evaluate, "ensemble": cmd_ensemble,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="formssl", description="Self-supervised workout-form pipeline.")
    p.add_argument("command", help=", ".join(COMMANDS))
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override a config key (repeatable)")
    p.add_argument("--jobs", type=int, help="worker cap")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", help="run directory")
    p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic execution")
    p.add_argument("--corpus", help="corpus directory (default <out>/corpus)")
    p.add_argument("--predictions", help="evaluate: predictions CSV")
    p.add_argument("--metrics", help="evaluate: metrics JSON output path")
    p.add_argument("--a", help="ensemble: first predictions (name or CSV)")
    p.add_argument("--b", help="ensemble: second predictions (name or CSV)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(err_name: str, detail: str, code: int) -> int:
    print(json.dumps({"error": err_name, "detail": detail}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command not in HANDLERS:
            raise UnknownCommand(f"unknown command {args.command!r}; expected one of {', '.join(COMMANDS)}")
        overrides = list(args.overrides)
        for key in ("jobs", "seed", "out"):
            if getattr(args, key) is not None:
                overrides.append(f"{key}={json.dumps(getattr(args, key))}")
        if args.deterministic:
            overrides.append("deterministic=true")
        config = load_config(args.config, overrides)
        if not config["deterministic"]:
            torch.set_num_threads(config["jobs"])
        run = Run(config, args.command, args.corpus)
        run.out.mkdir(parents=True, exist_ok=True)
        # the run directory itself is left out so identical runs in different places match
        _write_json(run.out / "config.json", {"config_hash": run.hash,
                                              "config": {k: v for k, v in config.items() if k != "out"}})
        extra = {}
        if args.command == "evaluate":
            extra = {"predictions": args.predictions, "metrics": args.metrics}
        elif args.command == "ensemble":
            extra = {"a": args.a, "b": args.b}
        outputs = HANDLERS[args.command](run, **extra)
    except FormSSLError as exc:
        return _fail(exc.name, str(exc), exc.exit_code)
    except OSError as exc:
        return _fail("IoError", str(exc), 1)
    log.info("wrote %s", outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
