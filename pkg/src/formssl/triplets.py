"""Deterministic construction of contrastive training units.

Pose triplets pair an anchor frame with a frame at a similar phase (the
positive) and one whose phase differs by more than ``delta`` (the negative).
In ``cvcspc`` mode positives come from other videos; in ``vanilla`` mode all
three legs share one video.

Motion-disentangling clip triplets take the descent of a repetition as the
anchor, an augmented copy of it as the positive and the ascent as the
negative; either the anchor/positive pair or the negative is played backwards
so all three share the same global motion direction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import InsufficientVideos, MissingFile, NoCandidates
from .trajectory import HalfCycle, Repetition, Trajectory

CVCSPC = "cvcspc"
VANILLA = "vanilla"


@dataclass(frozen=True)
class PoseTriplet:
    anchor: tuple  # (video_id, frame)
    positive: tuple
    negative: tuple
    phases: tuple  # (anchor, positive, negative)


class _Pool:
    """All valid frames of a corpus flattened in (video order, frame) order."""

    def __init__(self, trajectories: Sequence[Trajectory]):
        vids, frames, phases = [], [], []
        self.video_ids = []
        for k, tr in enumerate(trajectories):
            self.video_ids.append(tr.video_id)
            idx = np.flatnonzero(np.asarray(tr.valid_mask, dtype=bool))
            vids.append(np.full(len(idx), k))
            frames.append(idx)
            phases.append(np.asarray(tr.phase, dtype=float)[idx])
        self.video = np.concatenate(vids) if vids else np.zeros(0, int)
        self.frame = np.concatenate(frames) if frames else np.zeros(0, int)
        self.phase = np.concatenate(phases) if phases else np.zeros(0)

    def key(self, i):
        return self.video_ids[self.video[i]], int(self.frame[i])


def _candidate_masks(pool: _Pool, i: int, delta, epsilon_pos, mode, cross_video_negatives):
    gap = np.abs(pool.phase - pool.phase[i])
    same = pool.video == pool.video[i]
    if mode == CVCSPC:
        pos = ~same & (gap <= epsilon_pos)
        neg = gap > delta
        if cross_video_negatives:
            neg &= ~same
    elif mode == VANILLA:
        pos = same & (pool.frame != pool.frame[i]) & (gap <= epsilon_pos)
        neg = same & (gap > delta)
    else:
        raise ValueError(f"unknown mining mode {mode!r}")
    return pos, neg


def _check_args(trajectories, delta, epsilon_pos, mode):
    if not delta > epsilon_pos >= 0:
        raise ValueError("need delta > epsilon_pos >= 0")
    if mode == CVCSPC and len({t.video_id for t in trajectories}) < 2:
        raise InsufficientVideos("cvcspc mining needs at least 2 videos")


def candidate_sets(trajectories: Sequence[Trajectory], anchor: tuple, delta: float = 30.0,
                   epsilon_pos: float = 5.0, mode: str = CVCSPC,
                   cross_video_negatives: bool = False, strict: bool = False):
    """Positive and negative candidates of one anchor as lists of (video_id, frame).

    With ``strict`` an empty positive or negative set raises NoCandidates.
    """
    _check_args(trajectories, delta, epsilon_pos, mode)
    pool = _Pool(trajectories)
    vid_k = pool.video_ids.index(anchor[0])
    hit = np.flatnonzero((pool.video == vid_k) & (pool.frame == anchor[1]))
    if not len(hit):
        raise NoCandidates(f"anchor {anchor} is not a valid frame")
    pos, neg = _candidate_masks(pool, int(hit[0]), delta, epsilon_pos, mode, cross_video_negatives)
    pos_list = [pool.key(j) for j in np.flatnonzero(pos)]
    neg_list = [pool.key(j) for j in np.flatnonzero(neg)]
    if strict and not (pos_list and neg_list):
        raise NoCandidates(f"anchor {anchor}: {len(pos_list)} positives, {len(neg_list)} negatives")
    return pos_list, neg_list


def mine_pose_triplets(trajectories: Sequence[Trajectory], delta: float = 30.0,
                       epsilon_pos: float = 5.0, mode: str = CVCSPC, per_anchor: int = 1,
                       seed: int = 0, anchor_stride: int = 1,
                       cross_video_negatives: bool = False,
                       report: Optional[dict] = None) -> list[PoseTriplet]:
    """Mine phase-matched frame triplets.

    Anchors are the valid frames whose index is a multiple of
    ``anchor_stride``, visited in (trajectory order, frame) order. For each
    anchor, ``min(per_anchor, #positives)`` distinct positives are drawn
    without replacement and each gets one uniformly drawn negative, all from a
    single ``numpy.random.default_rng(seed)`` stream. Candidate lists are in
    pool order. Anchors lacking positives or negatives are skipped and
    counted in ``report["skipped"]`` when a dict is supplied.
    """
    _check_args(trajectories, delta, epsilon_pos, mode)
    pool = _Pool(trajectories)
    rng = np.random.default_rng(seed)
    out = []
    n_anchors = skipped = 0
    for i in range(len(pool.phase)):
        if pool.frame[i] % anchor_stride:
            continue
        n_anchors += 1
        pos, neg = _candidate_masks(pool, i, delta, epsilon_pos, mode, cross_video_negatives)
        pos_idx, neg_idx = np.flatnonzero(pos), np.flatnonzero(neg)
        if not len(pos_idx) or not len(neg_idx):
            skipped += 1
            continue
        k = min(per_anchor, len(pos_idx))
        picks_p = rng.choice(len(pos_idx), size=k, replace=False)
        picks_n = rng.integers(0, len(neg_idx), size=k)
        for a, b in zip(picks_p, picks_n):
            p, n = pos_idx[a], neg_idx[b]
            out.append(PoseTriplet(pool.key(i), pool.key(p), pool.key(n),
                                   (float(pool.phase[i]), float(pool.phase[p]), float(pool.phase[n]))))
    if report is not None:
        report.update(anchors=n_anchors, skipped=skipped, triplets=len(out))
    return out


# -------------------------------------------------------------------- clips

def sample_clip_indices(half_cycle, num_frames: int = 16) -> list[int]:
    """``round(linspace(start, end - 1, num_frames))`` with halves rounded up.

    Accepts a HalfCycle or a ``(start, end)`` pair. Short half-cycles repeat
    indices.
    """
    start, end = half_cycle.frame_range if isinstance(half_cycle, HalfCycle) else half_cycle
    if end - start < 1:
        raise ValueError("empty frame range")
    pos = np.linspace(start, end - 1, num_frames)
    return [int(v) for v in np.floor(pos + 0.5 + 1e-9)]


@dataclass(frozen=True)
class ClipSpec:
    video_id: str
    frame_indices: tuple
    reversed: bool = False
    augmentation_seed: int = 0


@dataclass(frozen=True)
class ClipTriplet:
    anchor: ClipSpec
    positive: ClipSpec
    negative: ClipSpec
    reverse_target: str  # "anchor_and_positive" or "negative"


def build_md_triplets(repetitions: Sequence[Repetition], num_frames: int = 16,
                      seed: int = 0) -> list[ClipTriplet]:
    """One clip triplet per repetition.

    Per repetition the generator draws, in order: the reversal coin, then
    augmentation seeds for anchor, positive and negative.
    """
    rng = np.random.default_rng(seed)
    out = []
    for rep in repetitions:
        reverse_negative = bool(rng.random() < 0.5)
        s_anc, s_pos, s_neg = (int(s) for s in rng.integers(0, 2**31 - 1, size=3))
        anc_idx = tuple(sample_clip_indices(rep.descent, num_frames))
        neg_idx = tuple(sample_clip_indices(rep.ascent, num_frames))
        flip_ap = not reverse_negative
        out.append(ClipTriplet(
            anchor=ClipSpec(rep.video_id, anc_idx, flip_ap, s_anc),
            positive=ClipSpec(rep.video_id, anc_idx, flip_ap, s_pos),
            negative=ClipSpec(rep.video_id, neg_idx, reverse_negative, s_neg),
            reverse_target="negative" if reverse_negative else "anchor_and_positive",
        ))
    return out


def temporal_reverse(clip: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(clip)[::-1])


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentationConfig:
    """Probabilities and ranges for clip augmentation (applied per clip, same for every frame)."""

    p_flip: float = 0.5
    p_mask: float = 0.3
    mask_frac: tuple = (0.1, 0.3)
    p_translate: float = 0.5
    max_translate_px: int = 6
    p_rotate: float = 0.3
    max_rotation_deg: float = 10.0
    p_blur: float = 0.2
    blur_kernels: tuple = (3,)
    p_zoom: float = 0.3
    zoom_range: tuple = (0.9, 1.1)
    p_channel_swap: float = 0.3
    p_temporal_shift: float = 0.3
    max_temporal_shift: int = 2

    @classmethod
    def off(cls) -> "AugmentationConfig":
        return cls(p_flip=0, p_mask=0, p_translate=0, p_rotate=0, p_blur=0, p_zoom=0,
                   p_channel_swap=0, p_temporal_shift=0)

    @classmethod
    def color_only(cls) -> "AugmentationConfig":
        return replace(cls.off(), p_channel_swap=1.0)


@dataclass(frozen=True)
class AugmentationPlan:
    temporal_shift: int = 0
    flip: bool = False
    rotation_deg: float = 0.0
    translate: tuple = (0, 0)  # (dx, dy) px
    zoom: float = 1.0
    blur_kernel: int = 1
    mask: Optional[tuple] = None  # (top, left, height, width) as fractions of the frame
    channel_perm: tuple = (0, 1, 2)

    @classmethod
    def identity(cls) -> "AugmentationPlan":
        return cls()


_PERMS = ((0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


def make_plan(seed, config: AugmentationConfig = AugmentationConfig()) -> AugmentationPlan:
    """Draw a plan from ``seed`` (an int or int sequence). Every parameter is drawn regardless of its switch."""
    rng = np.random.default_rng(seed)
    on = rng.random(8)
    shift = int(rng.integers(-config.max_temporal_shift, config.max_temporal_shift + 1))
    angle = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
    t = config.max_translate_px
    dx, dy = (int(v) for v in rng.integers(-t, t + 1, size=2))
    zoom = float(rng.uniform(*config.zoom_range))
    kernel = int(config.blur_kernels[rng.integers(len(config.blur_kernels))])
    mh, mw = rng.uniform(*config.mask_frac, size=2)
    top, left = rng.uniform(0, 1 - mh), rng.uniform(0, 1 - mw)
    perm = _PERMS[rng.integers(len(_PERMS))]
    return AugmentationPlan(
        temporal_shift=shift if on[0] < config.p_temporal_shift else 0,
        flip=bool(on[1] < config.p_flip),
        rotation_deg=angle if on[2] < config.p_rotate else 0.0,
        translate=(dx, dy) if on[3] < config.p_translate else (0, 0),
        zoom=zoom if on[4] < config.p_zoom else 1.0,
        blur_kernel=kernel if on[5] < config.p_blur else 1,
        mask=(float(top), float(left), float(mh), float(mw)) if on[6] < config.p_mask else None,
        channel_perm=perm if on[7] < config.p_channel_swap else (0, 1, 2),
    )


def _to_uint8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _translate(x, dx, dy):
    out = np.zeros_like(x)
    h, w = x.shape[1:3]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = x[:, ys, xs]
    return out


def apply_augmentations(clip: np.ndarray, plan: AugmentationPlan) -> np.ndarray:
    """Apply ``plan`` to a (T, H, W, C) uint8 clip, identically on every frame.

    Order: temporal shift, flip, rotation, translation, zoom, blur, mask,
    channel permutation. A single (H, W, C) frame is also accepted.
    """
    x = np.asarray(clip)
    single = x.ndim == 3
    if single:
        x = x[None]
    t, h, w = x.shape[:3]
    if plan.temporal_shift:
        x = x[np.clip(np.arange(t) + plan.temporal_shift, 0, t - 1)]
    if plan.flip:
        x = x[:, :, ::-1]
    if plan.rotation_deg:
        x = _to_uint8(ndimage.rotate(x.astype(np.float32), plan.rotation_deg, axes=(2, 1),
                                     reshape=False, order=1, mode="constant"))
    if plan.translate != (0, 0):
        x = _translate(x, *plan.translate)
    if plan.zoom != 1.0:
        s = plan.zoom
        c = np.array([0, (h - 1) / 2, (w - 1) / 2, 0])
        scale = np.array([1, 1 / s, 1 / s, 1])
        x = _to_uint8(ndimage.affine_transform(x.astype(np.float32), np.diag(scale), offset=c - c * scale,
                                               order=1, mode="nearest"))
    if plan.blur_kernel > 1:
        k = plan.blur_kernel
        x = _to_uint8(ndimage.uniform_filter(x.astype(np.float32), size=(1, k, k, 1), mode="nearest"))
    if plan.mask is not None:
        top, left, mh, mw = plan.mask
        y0, x0 = int(top * h), int(left * w)
        x = x.copy()
        x[:, y0:y0 + max(1, int(mh * h)), x0:x0 + max(1, int(mw * w))] = 0
    if tuple(plan.channel_perm) != (0, 1, 2):
        x = x[..., list(plan.channel_perm)]
    x = np.ascontiguousarray(x)
    return x[0] if single else x


def materialize_clip(spec: ClipSpec, frame_source, aug_config: Optional[AugmentationConfig] = None,
                     epoch: int = 0) -> np.ndarray:
    """Load a clip's frames, play it backwards if flagged, then augment from its seed.

    ``epoch > 0`` draws the plan from ``(augmentation_seed, epoch)`` so every
    training epoch sees a fresh, still reproducible, augmentation.
    """
    clip = frame_source(spec.video_id, list(spec.frame_indices))
    if spec.reversed:
        clip = temporal_reverse(clip)
    if aug_config is not None:
        seed = spec.augmentation_seed if epoch == 0 else [spec.augmentation_seed, epoch]
        clip = apply_augmentations(clip, make_plan(seed, aug_config))
    return clip


# ---------------------------------------------------------------- manifests

def write_pose_triplets(path, triplets: Iterable[PoseTriplet], config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for t in triplets:
            legs = {}
            for name, leg, ph in zip(("anchor", "positive", "negative"),
                                     (t.anchor, t.positive, t.negative), t.phases):
                legs[name] = {"video_id": leg[0], "frame": leg[1], "phase": ph}
            fh.write(json.dumps({**legs, "config_hash": config_hash}) + "\n")


def load_pose_triplets(path) -> list[PoseTriplet]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for o in map(json.loads, filter(str.strip, fh)):
            legs = [o[k] for k in ("anchor", "positive", "negative")]
            out.append(PoseTriplet(*[(leg["video_id"], leg["frame"]) for leg in legs],
                                   tuple(leg["phase"] for leg in legs)))
    return out


def write_clip_triplets(path, triplets: Iterable[ClipTriplet], config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for t in triplets:
            row = {}
            for name in ("anchor", "positive", "negative"):
                d = asdict(getattr(t, name))
                d["frame_indices"] = list(d["frame_indices"])
                row[name] = d
            row["reverse_target"] = t.reverse_target
            row["config_hash"] = config_hash
            fh.write(json.dumps(row) + "\n")


def load_clip_triplets(path) -> list[ClipTriplet]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for o in map(json.loads, filter(str.strip, fh)):
            legs = []
            for name in ("anchor", "positive", "negative"):
                d = o[name]
                legs.append(ClipSpec(d["video_id"], tuple(d["frame_indices"]),
                                     bool(d["reversed"]), int(d["augmentation_seed"])))
            out.append(ClipTriplet(*legs, o["reverse_target"]))
    return out
