"""The three pretext tasks: pose contrastive (cvcspc / vanilla_pc), motion
disentangling (md) and pose/appearance disentangling (pad).

Frames reach the trainers through a *frame source*: any callable
``source(video_id, indices) -> uint8 (N, H, W, 3)``, for example
:class:`formssl.ingest.FrameStore`.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint
from .errors import DivergedLoss, EmptyManifest, ShapeMismatch
from .losses import distance_ratio_loss
from .models import ImageEncoder, PadAutoencoder, VideoEncoder, to_input
from .triplets import AugmentationConfig, ClipTriplet, PoseTriplet, apply_augmentations, make_plan, materialize_clip

log = logging.getLogger(__name__)

_TASK_DEFAULTS = {
    "cvcspc": dict(epochs=100, batch_size=25, encoder="resnet18"),
    "vanilla_pc": dict(epochs=100, batch_size=25, encoder="resnet18", augment=True),
    "md": dict(epochs=20, batch_size=5, encoder="r2plus1d18", image_size=112),
    "pad": dict(epochs=500, batch_size=25, encoder="resnet18"),
}


@dataclass
class TrainConfig:
    task: str = "cvcspc"
    encoder: str = "resnet18"  # tiny | resnet18 | r2plus1d18
    embedding_dim: int = 128
    image_size: int = 224
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    epochs: int = 100
    batch_size: int = 25
    num_frames: int = 16
    pose_dim: int = 32
    appearance_dim: int = 256
    pairs_per_video: int = 4
    l2_normalize: bool = False
    augment: bool = False
    augmentation: dict = field(default_factory=lambda: asdict(AugmentationConfig()))
    init_weights: Optional[str] = None
    seed: int = 0
    deterministic: bool = True

    @classmethod
    def for_task(cls, task: str, **overrides) -> "TrainConfig":
        """Task defaults (lr 1e-4, Adam; epochs/batch per task) with ``overrides`` applied."""
        if task not in _TASK_DEFAULTS:
            raise ValueError(f"unknown pretext task {task!r}")
        return cls(task=task, **{**_TASK_DEFAULTS[task], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return cls(**kw)

    def augmentation_config(self) -> AugmentationConfig:
        d = dict(self.augmentation)
        for k in ("mask_frac", "zoom_range", "blur_kernels"):
            if k in d:
                d[k] = tuple(d[k])
        return AugmentationConfig(**d)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def build_model(config: dict) -> torch.nn.Module:
    """Instantiate the network described by a checkpoint config snapshot."""
    task = config["task"]
    if task in ("cvcspc", "vanilla_pc"):
        return ImageEncoder(config["encoder"], config["embedding_dim"], config.get("l2_normalize", False))
    if task == "md":
        return VideoEncoder(config["encoder"], config["embedding_dim"], config.get("l2_normalize", False))
    if task == "pad":
        return PadAutoencoder(config["encoder"], config["image_size"], config["pose_dim"],
                              config["appearance_dim"])
    if task == "detector":
        from .errordet import build_detector
        return build_detector(config)
    raise ValueError(f"unknown task {task!r}")


def load_model(ckpt: Checkpoint) -> torch.nn.Module:
    model = build_model({**ckpt.config, "task": ckpt.task})
    model.load_state_dict(ckpt.state)
    model.eval()
    return model


def load_matching(model: torch.nn.Module, state) -> int:
    """Copy every tensor whose name and shape match; returns the count copied."""
    own = model.state_dict()
    matched = OrderedDict((k, v) for k, v in state.items() if k in own and own[k].shape == v.shape)
    own.update(matched)
    model.load_state_dict(own)
    return len(matched)


def snapshot(model: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())


def _init_model(config: TrainConfig):
    seed_everything(config.seed, config.deterministic)
    model = build_model(asdict(config))
    if config.init_weights:
        n = load_matching(model, load_checkpoint(config.init_weights).state)
        log.info("initialized %d tensors from %s", n, config.init_weights)
    return model


def run_epochs(model, config: TrainConfig, make_epoch: Callable, compute_loss: Callable,
               split: str = "train", on_epoch: Optional[Callable] = None) -> list:
    """Shared Adam loop. ``make_epoch(rng)`` lists the epoch's items in order;
    ``compute_loss(batch, rng)`` returns a scalar tensor for one batch."""
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas))
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        model.train()
        items = make_epoch(rng)
        total = 0.0
        for start in range(0, len(items), config.batch_size):
            batch = items[start:start + config.batch_size]
            loss = compute_loss(batch, rng)
            if not torch.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        history.append({"epoch": epoch, "split": split, "loss": total / len(items)})
        log.debug("epoch %d loss %.5f", epoch, history[-1]["loss"])
        if on_epoch is not None:
            on_epoch(epoch, history)
    model.eval()
    return history


def _shuffled(items):
    return lambda rng: [items[i] for i in rng.permutation(len(items))]


# ------------------------------------------------------------- contrastive

def _pose_batch(batch: Sequence[PoseTriplet], frame_source, aug: Optional[AugmentationConfig], rng):
    imgs = []
    for leg in range(3):
        for t in batch:
            vid, frame = (t.anchor, t.positive, t.negative)[leg]
            img = frame_source(vid, [frame])[0]
            if aug is not None:
                img = apply_augmentations(img, make_plan(int(rng.integers(2**31 - 1)), aug))
            imgs.append(img)
    return np.stack(imgs)


def triplet_loss_on_batch(model, frames: np.ndarray) -> torch.Tensor:
    """Mean distance-ratio loss of a (3B, ...) stack ordered anchors, positives, negatives."""
    emb = model(to_input(frames))
    a, p, n = emb.chunk(3)
    return distance_ratio_loss(a, p, n)


def train_cvcspc(triplets: Sequence[PoseTriplet], frame_source, config: TrainConfig) -> Checkpoint:
    """Pose-contrastive pretraining (task ``cvcspc`` or ``vanilla_pc``)."""
    if config.task not in ("cvcspc", "vanilla_pc"):
        raise ValueError("train_cvcspc needs task cvcspc or vanilla_pc")
    if not len(triplets):
        raise EmptyManifest("no triplets to train on")
    model = _init_model(config)
    aug = config.augmentation_config() if config.augment else None
    history = run_epochs(model, config, _shuffled(list(triplets)),
                         lambda b, rng: triplet_loss_on_batch(model, _pose_batch(b, frame_source, aug, rng)))
    return Checkpoint(config.task, asdict(config), snapshot(model), history, config.seed)


def _clip_batch(batch: Sequence[ClipTriplet], frame_source, aug: Optional[AugmentationConfig], epoch: int = 0):
    clips = []
    for leg in ("anchor", "positive", "negative"):
        for t in batch:
            clips.append(materialize_clip(getattr(t, leg), frame_source, aug, epoch))
    return np.stack(clips)


def train_md(triplets: Sequence[ClipTriplet], frame_source, config: TrainConfig) -> Checkpoint:
    """Motion-disentangling pretraining on half-cycle clip triplets."""
    if not len(triplets):
        raise EmptyManifest("no clip triplets to train on")
    lengths = {len(getattr(t, leg).frame_indices) for t in triplets for leg in ("anchor", "positive", "negative")}
    if len(lengths) != 1:
        raise ShapeMismatch(f"inconsistent clip lengths {sorted(lengths)}")
    model = _init_model(config)
    aug = config.augmentation_config()
    items = list(triplets)
    # epoch 0 uses the manifest's plans; later epochs draw fresh ones
    epoch = [-1]

    def make_epoch(rng):
        epoch[0] += 1
        return [(items[i], epoch[0]) for i in rng.permutation(len(items))]

    def compute_loss(batch, rng):
        return triplet_loss_on_batch(model, _clip_batch([t for t, _ in batch], frame_source, aug, batch[0][1]))

    history = run_epochs(model, config, make_epoch, compute_loss)
    return Checkpoint("md", asdict(config), snapshot(model), history, config.seed)


@torch.no_grad()
def evaluate_triplet_loss(model, triplets, frame_source, aug: Optional[AugmentationConfig] = None,
                          batch_size: int = 16) -> float:
    """Mean loss over pose or clip triplets in evaluation mode.

    Clip legs are materialized exactly as in training (reversal, then
    augmentation from each leg's seed). Pose legs are not augmented.
    """
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(triplets), batch_size):
        batch = triplets[start:start + batch_size]
        if isinstance(batch[0], ClipTriplet):
            frames = _clip_batch(batch, frame_source, aug)
        else:
            frames = _pose_batch(batch, frame_source, None, None)
        total += float(triplet_loss_on_batch(model, frames)) * len(batch)
        count += len(batch)
    return total / count


# --------------------------------------------------------------------- PAD

def _pad_loss(model, batch, frame_source):
    xi = np.stack([frame_source(v, [i])[0] for v, i, _ in batch])
    xj = np.stack([frame_source(v, [j])[0] for v, _, j in batch])
    ri, rj, _ = model(to_input(xi), to_input(xj))
    ti = torch.as_tensor(xi).permute(0, 3, 1, 2).float() / 255.0
    tj = torch.as_tensor(xj).permute(0, 3, 1, 2).float() / 255.0
    return 0.5 * (F.mse_loss(ri, ti) + F.mse_loss(rj, tj))


@torch.no_grad()
def evaluate_reconstruction(model: PadAutoencoder, pairs, frame_source, batch_size: int = 32) -> float:
    """Mean swapped-reconstruction error over ``(video_id, i, j)`` pairs in evaluation mode."""
    model.eval()
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start:start + batch_size]
        total += float(_pad_loss(model, batch, frame_source)) * len(batch)
    return total / len(pairs)


def sample_frame_pairs(video_ids: Sequence[str], frame_counts: Sequence[int], pairs_per_video: int, rng):
    """Draw ``pairs_per_video`` pairs of distinct frames per video, uniformly."""
    items = []
    for vid, n in zip(video_ids, frame_counts):
        if n < 2:
            continue
        for _ in range(pairs_per_video):
            i = int(rng.integers(n))
            j = int((i + 1 + rng.integers(n - 1)) % n)
            items.append((vid, i, j))
    return items


def train_pad(video_ids: Sequence[str], frame_source, config: TrainConfig,
              frame_counts: Optional[Sequence[int]] = None) -> Checkpoint:
    """Pose/appearance disentangling pretraining.

    Each epoch draws fresh frame pairs from every video and minimizes the
    mean squared error of both appearance-swapped reconstructions.
    """
    if not len(video_ids):
        raise EmptyManifest("no videos to train on")
    if frame_counts is None:
        frame_counts = [frame_source.frame_count(v) for v in video_ids]
    model = _init_model(config)

    def make_epoch(rng):
        items = sample_frame_pairs(video_ids, frame_counts, config.pairs_per_video, rng)
        return [items[i] for i in rng.permutation(len(items))]

    history = run_epochs(model, config, make_epoch, lambda b, rng: _pad_loss(model, b, frame_source))
    return Checkpoint("pad", asdict(config), snapshot(model), history, config.seed)


@dataclass
class PadLatent:
    pose: np.ndarray
    appearance: np.ndarray


@torch.no_grad()
def pad_forward(model: PadAutoencoder, frame_i: np.ndarray, frame_j: np.ndarray):
    """Swap-reconstruct two uint8 frames (or equal-sized batches).

    Returns ``(recon_i, recon_j, (latent_i, latent_j))``; reconstructions are
    float arrays in [0, 255] with the same shape as the inputs.
    """
    single = np.ndim(frame_i) == 3
    xi, xj = (np.asarray(f)[None] if single else np.asarray(f) for f in (frame_i, frame_j))
    if xi.shape != xj.shape:
        raise ShapeMismatch(f"frame shapes differ: {xi.shape} vs {xj.shape}")
    model.eval()
    ri, rj, ((pi, ai), (pj, aj)) = model(to_input(xi), to_input(xj))
    ri, rj = (r.permute(0, 2, 3, 1).numpy() * 255.0 for r in (ri, rj))
    lat_i, lat_j = PadLatent(pi.numpy(), ai.numpy()), PadLatent(pj.numpy(), aj.numpy())
    if single:
        ri, rj = ri[0], rj[0]
        lat_i = PadLatent(lat_i.pose[0], lat_i.appearance[0])
        lat_j = PadLatent(lat_j.pose[0], lat_j.appearance[0])
    return ri, rj, (lat_i, lat_j)


# ---------------------------------------------------------------- encoding

@torch.no_grad()
def encode_image(model, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """One embedding per frame, (N, D) float32. PAD models yield their pose vectors."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ShapeMismatch(f"expected (N, H, W, 3) frames, got {frames.shape}")
    model.eval()
    out = []
    for start in range(0, len(frames), batch_size):
        x = to_input(frames[start:start + batch_size])
        out.append((model.pose(x) if isinstance(model, PadAutoencoder) else model(x)).numpy())
    return np.concatenate(out).astype(np.float32)


@torch.no_grad()
def encode_clip(model: VideoEncoder, clip: np.ndarray) -> np.ndarray:
    """Embedding of one (T, H, W, 3) clip, or (N, D) for a batch of clips."""
    clip = np.asarray(clip)
    single = clip.ndim == 4
    if single:
        clip = clip[None]
    if clip.ndim != 5:
        raise ShapeMismatch(f"expected (T, H, W, 3) clip, got {clip.shape}")
    model.eval()
    z = model(to_input(clip)).numpy().astype(np.float32)
    return z[0] if single else z
