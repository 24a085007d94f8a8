"""Supervised error detection on top of pretext features.

Video errors: frame features from a frozen image encoder are aggregated by a
1D residual temporal head. Static (single-image) errors: the encoder and a
linear head are finetuned end to end. Both use cross-entropy with class
weights ``N / (K * n_c)``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .errors import (
    EmptyPredictions,
    IdSetMismatch,
    MissingClass,
    MissingFile,
    SchemaViolation,
    SingleClass,
    TooFewJoints,
    WrongCheckpointKind,
    ZeroCount,
)
from .ingest import VideoRecord
from .models import StaticDetector, TemporalHead, to_input
from .pretext import build_model, encode_image, load_model, seed_everything, snapshot
from .triplets import sample_clip_indices

log = logging.getLogger(__name__)

IMAGE_TASKS = ("cvcspc", "vanilla_pc", "pad")


def class_weights(counts):
    """Per-class weights ``N / (K * n_c)``; accepts a mapping or a sequence of counts."""
    items = list(counts.items()) if isinstance(counts, Mapping) else list(enumerate(counts))
    if len(items) < 2:
        raise SingleClass("class weights need at least two classes")
    if any(n < 1 for _, n in items):
        raise ZeroCount("every class needs at least one sample")
    total, k = sum(n for _, n in items), len(items)
    weights = {c: total / (k * n) for c, n in items}
    return weights if isinstance(counts, Mapping) else [weights[i] for i in range(k)]


# ----------------------------------------------------------------- features

@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray  # (T, D)
    frame_indices: list


def feature_indices(frame_count: int, target_frames: int = 200, mode: str = "uniform") -> list[int]:
    """Frames to encode: uniform linspace sampling, or a centered contiguous window."""
    if mode == "uniform" or frame_count <= target_frames:
        return sample_clip_indices((0, frame_count), target_frames)
    if mode == "window":
        start = (frame_count - target_frames) // 2
        return list(range(start, start + target_frames))
    raise ValueError(f"unknown sampling mode {mode!r}")


def extract_features(checkpoint, video: VideoRecord, frame_source, target_frames: int = 200,
                     mode: str = "uniform", model=None) -> FeatureSequence:
    """Encode ``target_frames`` frames of ``video`` with a frozen image encoder.

    PAD checkpoints yield their pose vectors. Pass ``model`` to reuse an
    already-loaded network across videos.
    """
    if checkpoint is not None and checkpoint.task not in IMAGE_TASKS:
        raise WrongCheckpointKind(f"features need an image-encoder checkpoint, got {checkpoint.task!r}")
    if model is None:
        model = load_model(checkpoint)
    idx = feature_indices(video.frame_count, target_frames, mode)
    feats = encode_image(model, frame_source(video.video_id, idx))
    return FeatureSequence(video.video_id, feats, idx)


def write_features(directory, seqs: Sequence[FeatureSequence]) -> None:
    """One ``<video_id>.npy`` per sequence plus ``index.jsonl`` with frame indices."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "index.jsonl").open("w", encoding="utf-8") as fh:
        for s in seqs:
            np.save(directory / f"{s.video_id}.npy", np.asarray(s.features, dtype=np.float32))
            fh.write(json.dumps({"video_id": s.video_id, "frame_indices": list(map(int, s.frame_indices)),
                                 "dim": int(s.features.shape[1])}) + "\n")


def load_features(directory) -> dict[str, FeatureSequence]:
    directory = Path(directory)
    index = directory / "index.jsonl"
    if not index.is_file():
        raise MissingFile(str(index))
    out = {}
    with index.open("r", encoding="utf-8") as fh:
        for o in map(json.loads, filter(str.strip, fh)):
            out[o["video_id"]] = FeatureSequence(o["video_id"], np.load(directory / f"{o['video_id']}.npy"),
                                                 o["frame_indices"])
    return out


# ---------------------------------------------------------- temporal head

@dataclass
class DetectorConfig:
    blocks: int = 3
    channels: int = 64
    kernel: int = 7
    pooling: str = "mean"
    dropout: float = 0.0
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    threshold: float = 0.5
    seed: int = 0
    deterministic: bool = True
    # static finetuning
    freeze_backbone: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_detector(config: dict):
    if config["kind"] == "temporal":
        return TemporalHead(config["in_dim"], config["blocks"], config["channels"], config["kernel"],
                            config["pooling"], dropout=config.get("dropout", 0.0))
    if config["kind"] == "static":
        backbone = config["backbone"]
        encoder = build_model(backbone)
        dim = backbone["pose_dim"] if backbone["task"] == "pad" else backbone["embedding_dim"]
        return StaticDetector(encoder, dim)
    raise ValueError(f"unknown detector kind {config['kind']!r}")


def _collate(seqs: Sequence[np.ndarray]):
    """Pad to the longest sequence by repeating the last frame; returns (x, mask)."""
    t_max = max(len(s) for s in seqs)
    x = np.empty((len(seqs), t_max, seqs[0].shape[1]), dtype=np.float32)
    mask = np.zeros((len(seqs), t_max), dtype=np.float32)
    for k, s in enumerate(seqs):
        x[k, :len(s)] = s
        x[k, len(s):] = s[-1]
        mask[k, :len(s)] = 1.0
    return torch.from_numpy(x), torch.from_numpy(mask)


def weighted_cross_entropy(logits, labels, weights=None):
    """Cross-entropy with per-class weights, normalized by the summed sample weights."""
    w = None if weights is None else torch.as_tensor(weights, dtype=logits.dtype)
    return F.cross_entropy(logits, labels, weight=w)


@torch.no_grad()
def predict_proba(model, seqs: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(seqs), batch_size):
        x, m = _collate(seqs[start:start + batch_size])
        out.append(torch.softmax(model(x, m), dim=-1)[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros(0)


def _labels_ok(labels):
    present = set(int(v) for v in labels)
    if present != {0, 1}:
        raise MissingClass(f"training labels must contain both classes, got {sorted(present)}")


def train_temporal_head(train: Sequence[FeatureSequence], train_labels: Sequence[int],
                        val: Sequence[FeatureSequence] = (), val_labels: Sequence[int] = (),
                        config: DetectorConfig = DetectorConfig(), weights=None) -> Checkpoint:
    """Fit the temporal head with class-weighted cross-entropy.

    After every epoch the validation F1 is computed; the returned checkpoint
    holds the parameters of the best-F1 epoch (earliest on ties). Without a
    validation set the last epoch is kept. The log has one ``train`` row per
    epoch and, with validation data, one ``val`` row carrying ``loss`` and
    ``f1``.
    """
    _labels_ok(train_labels)
    if weights is None:
        c = Counter(int(v) for v in train_labels)
        weights = class_weights([c[0], c[1]])
    seed_everything(config.seed, config.deterministic)
    in_dim = int(train[0].features.shape[1])
    model_cfg = {"task": "detector", "kind": "temporal", "in_dim": in_dim, **asdict(config),
                 "class_weights": list(map(float, weights))}
    model = build_detector(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    xs = [s.features for s in train]
    ys = np.asarray(train_labels, dtype=np.int64)
    history, best, best_f1 = [], None, -1.0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(xs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:  # batch norm needs more than one sequence
                continue
            x, m = _collate([xs[i] for i in idx])
            loss = weighted_cross_entropy(model(x, m), torch.from_numpy(ys[idx]), weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "split": "train", "loss": total / len(xs)})
        if len(val):
            probs = predict_proba(model, [s.features for s in val])
            vy = np.asarray(val_labels, dtype=np.int64)
            p = torch.from_numpy(np.clip(np.stack([1 - probs, probs], 1), 1e-7, 1))
            vloss = float(F.nll_loss(torch.log(p), torch.from_numpy(vy), weight=torch.tensor(weights, dtype=p.dtype)))
            rep = evaluate_f1([PredictionRecord(s.video_id, "", float(q), int(l))
                               for s, q, l in zip(val, probs, vy)], config.threshold, warn=False)
            history.append({"epoch": epoch, "split": "val", "loss": vloss, "f1": rep.f1})
            if rep.f1 > best_f1:
                best_f1, best = rep.f1, snapshot(model)
    state = best if best is not None else snapshot(model)
    model_cfg["best_val_f1"] = best_f1 if best is not None else None
    return Checkpoint("detector", model_cfg, state, history, config.seed)


# ------------------------------------------------------- static finetuning

def finetune_static(checkpoint: Checkpoint, images: np.ndarray, labels: Sequence[int],
                    config: DetectorConfig = DetectorConfig(), weights=None) -> Checkpoint:
    """Train encoder + linear head jointly on single frames.

    ``checkpoint`` may be any image pretext checkpoint, including one trained
    on a different exercise. ``config.epochs = 0`` returns the initialization.
    """
    if checkpoint.task not in IMAGE_TASKS:
        raise WrongCheckpointKind(f"static finetuning needs an image encoder, got {checkpoint.task!r}")
    _labels_ok(labels)
    if weights is None:
        c = Counter(int(v) for v in labels)
        weights = class_weights([c[0], c[1]])
    seed_everything(config.seed, config.deterministic)
    backbone_cfg = {**checkpoint.config, "task": checkpoint.task}
    model_cfg = {"task": "detector", "kind": "static", "backbone": backbone_cfg, **asdict(config),
                 "class_weights": list(map(float, weights))}
    model = build_detector(model_cfg)
    model.encoder.load_state_dict(checkpoint.state)
    params = model.head.parameters() if config.freeze_backbone else model.parameters()
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    images = np.asarray(images)
    ys = np.asarray(labels, dtype=np.int64)
    history = []
    for epoch in range(config.epochs):
        model.train()
        if config.freeze_backbone:
            model.encoder.eval()
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            loss = weighted_cross_entropy(model(to_input(images[idx])), torch.from_numpy(ys[idx]), weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "split": "train", "loss": total / len(images)})
    model.eval()
    return Checkpoint("detector", model_cfg, snapshot(model), history, config.seed)


@torch.no_grad()
def predict_static(model: StaticDetector, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = [torch.softmax(model(to_input(images[s:s + batch_size])), -1)[:, 1].numpy()
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class PredictionRecord:
    video_id: str
    error_type: str
    probability: float
    label: int

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")


@dataclass
class F1Report:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_f1(predictions: Sequence[PredictionRecord], threshold: float = 0.5,
                warn: bool = True) -> F1Report:
    """F1 of the error-positive class after thresholding (``p >= threshold`` is positive).

    Undefined precision or recall counts as 0, and so does F1 when both are 0;
    each such case adds a message to ``warnings``.
    """
    if not len(predictions):
        raise EmptyPredictions("no predictions to evaluate")
    tp = fp = fn = tn = 0
    for p in predictions:
        pred = p.probability >= threshold
        if pred and p.label:
            tp += 1
        elif pred:
            fp += 1
        elif p.label:
            fn += 1
        else:
            tn += 1
    notes = []
    if tp + fp == 0:
        precision = 0.0
        notes.append("no positive predictions; precision set to 0")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        notes.append("no positive labels; recall set to 0")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        notes.append("precision + recall = 0; F1 set to 0")
    else:
        f1 = 2 * tp / (2 * tp + fp + fn)  # same value as the harmonic mean, one rounding
    if warn:
        for n in notes:
            warnings.warn(n, RuntimeWarning, stacklevel=2)
    return F1Report(f1, precision, recall, tp, fp, fn, tn, threshold, notes)


def best_threshold(predictions: Sequence[PredictionRecord]) -> float:
    """Threshold maximizing F1 over the observed probabilities (validation sweep)."""
    cands = sorted({p.probability for p in predictions})
    return max(cands, key=lambda t: (evaluate_f1(predictions, t, warn=False).f1, -t))


def _logit(p):
    p = min(max(p, 1e-12), 1 - 1e-12)
    return np.log(p / (1 - p))


def ensemble(predictions_a: Sequence[PredictionRecord], predictions_b: Sequence[PredictionRecord],
             method: str = "mean") -> list[PredictionRecord]:
    """Average two prediction sets per video (probability mean, or ``"logit"`` mean)."""
    a = {(p.video_id, p.error_type): p for p in predictions_a}
    b = {(p.video_id, p.error_type): p for p in predictions_b}
    if set(a) != set(b) or len(a) != len(predictions_a) or len(b) != len(predictions_b):
        raise IdSetMismatch("prediction sets cover different videos or error types")
    out = []
    for key in sorted(a):
        pa, pb = a[key], b[key]
        if pa.label != pb.label:
            raise IdSetMismatch(f"{key}: labels disagree")
        if method == "mean":
            prob = (pa.probability + pb.probability) / 2
        elif method == "logit":
            prob = float(1 / (1 + np.exp(-(_logit(pa.probability) + _logit(pb.probability)) / 2)))
        else:
            raise ValueError(f"unknown ensemble method {method!r}")
        out.append(PredictionRecord(pa.video_id, pa.error_type, min(max(prob, 0.0), 1.0), pa.label))
    return out


def write_predictions(path, predictions: Sequence[PredictionRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "error_type", "probability", "label"])
        for p in predictions:
            w.writerow([p.video_id, p.error_type, repr(float(p.probability)), int(p.label)])


def load_predictions(path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    out = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append(PredictionRecord(row["video_id"], row["error_type"], float(row["probability"]),
                                            int(row["label"])))
            except (KeyError, TypeError, ValueError):
                raise SchemaViolation(lineno, "probability/label") from None
    return out


def write_metrics(path, report: F1Report, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**report.to_json(), **(extra or {})}, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- baselines

def tdm(joint_positions: np.ndarray) -> np.ndarray:
    """Temporal distance matrix: pairwise joint distances, rows (j, k) with j < k, columns frames."""
    x = np.asarray(joint_positions, dtype=float)
    if x.ndim != 3 or x.shape[2] not in (2, 3):
        raise ValueError("joint positions must be (T, J, 2) or (T, J, 3)")
    if x.shape[1] < 2:
        raise TooFewJoints("TDM needs at least two joints")
    j, k = np.triu_indices(x.shape[1], k=1)
    return np.linalg.norm(x[:, j] - x[:, k], axis=-1).T


# ------------------------------------------------------------ visualization

def pca_heatmap(feature_map: np.ndarray) -> np.ndarray:
    """First principal component of the (H', W', C) activations, min-max scaled to [0, 1].

    The component's sign is chosen so the largest-magnitude projection is
    positive. Zero variance gives an all-zero map.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    h, w, c = fm.shape
    flat = fm.reshape(-1, c)
    centered = flat - flat.mean(0)
    if not np.any(np.abs(centered) > 1e-12):
        return np.zeros((h, w))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[0]
    if proj[np.argmax(np.abs(proj))] < 0:
        proj = -proj
    span = proj.max() - proj.min()
    if span <= 1e-12:
        return np.zeros((h, w))
    return ((proj - proj.min()) / span).reshape(h, w)


def visualize_features_pca(feature_map: np.ndarray, image: np.ndarray, alpha: float = 0.5,
                           path=None) -> np.ndarray:
    """Overlay the PCA heatmap of ``feature_map`` on ``image`` (uint8 H x W x 3).

    The heatmap is bilinearly upsampled to the image size and blended with a
    blue-to-red ramp. Writes a PNG when ``path`` is given.
    """
    image = np.asarray(image, dtype=np.uint8)
    heat = torch.from_numpy(pca_heatmap(feature_map))[None, None]
    heat = F.interpolate(heat, size=image.shape[:2], mode="bilinear", align_corners=False)[0, 0].numpy()
    heat = np.clip(heat, 0, 1)
    color = np.stack([heat, np.zeros_like(heat), 1 - heat], -1) * 255
    out = np.clip(np.rint((1 - alpha) * image + alpha * color), 0, 255).astype(np.uint8)
    if path is not None:
        from PIL import Image

        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(out).save(path, format="PNG")
    return out


@torch.no_grad()
def spatial_features(model, frame: np.ndarray) -> np.ndarray:
    """Last spatial activations of an image encoder for one frame, as (H', W', C)."""
    model.eval()
    trunk = model.trunk
    return trunk(to_input(np.asarray(frame)[None]))[0].permute(1, 2, 0).numpy()
