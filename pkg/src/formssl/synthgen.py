"""Synthetic squat videos with analytic ground truth.

A front-facing 2D stick figure squats with a barbell on its shoulders. The
hip height follows a raised cosine (standing at t=0, deepest at half a
period), legs are rigid two-link chains solved in closed form, and the bar
sits a fixed distance above the shoulders. Form errors perturb the knees
only inside the configured phase window, so frames outside it are
pixel-identical to the clean rendering.

Figure coordinates are in pixels at camera scale 1, origin on the ground
midway between the ankles, y up. Rendering maps them into the image with the
camera scale and horizontal offset.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import BadParams, IoError
from .ingest import Box, DetectionStream, LabelRecord, VideoRecord, write_detections, write_manifest

JOINTS = ("hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r",
          "shoulder_l", "shoulder_r", "bar_l", "bar_r")
# rigid links as joint-name pairs
LINKS = (("ankle_l", "knee_l"), ("ankle_r", "knee_r"), ("knee_l", "hip_l"), ("knee_r", "hip_r"),
         ("shoulder_l", "shoulder_r"), ("bar_l", "bar_r"))

ERROR_LABELS = {"none": "Clean", "knee_inward": "KIE", "knee_forward": "KFE",
                "shallow_depth": "ShallowSquat"}


@dataclass(frozen=True)
class Appearance:
    background: tuple = (225, 225, 220)
    legs: tuple = (40, 60, 160)
    torso: tuple = (200, 50, 50)
    skin: tuple = (230, 190, 150)
    bar: tuple = (30, 30, 30)
    limb_width: float = 2.2
    # body proportions, as fractions of image size
    leg_link: float = 0.2
    torso_len: float = 0.24
    shoulder_half: float = 0.085
    hip_half: float = 0.055
    stance_half: float = 0.085


@dataclass(frozen=True)
class Camera:
    offset_x: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class ErrorSpec:
    type: str = "none"  # none | knee_inward | knee_forward | shallow_depth
    magnitude: float = 0.0
    phase_window: str = "ascent"  # ascent | descent | both
    max_offset: float = 0.07  # knee displacement at magnitude 1, fraction of image size


@dataclass(frozen=True)
class SynthParams:
    num_frames: int = 80
    period: int = 40
    repetitions: int = 2
    amplitude: float = 0.25  # hip/bar travel as a fraction of image size
    image_size: int = 128
    appearance: Appearance = field(default_factory=Appearance)
    camera: Camera = field(default_factory=Camera)
    error: ErrorSpec = field(default_factory=ErrorSpec)
    detection_noise_sigma: float = 0.0
    seed: int = 0
    video_id: str = "syn_0000"
    fps: float = 30.0

    def validate(self):
        if self.period < 8:
            raise BadParams("period must be >= 8 frames")
        if self.num_frames < 2 or self.repetitions < 1:
            raise BadParams("need num_frames >= 2 and repetitions >= 1")
        if not self.amplitude > 0:
            raise BadParams("amplitude must be > 0")
        if not 0.0 <= self.error.magnitude <= 1.0:
            raise BadParams("error magnitude must be in [0, 1]")
        if self.error.type not in ERROR_LABELS:
            raise BadParams(f"unknown error type {self.error.type!r}")
        if self.error.phase_window not in ("ascent", "descent", "both"):
            raise BadParams(f"unknown phase window {self.error.phase_window!r}")
        if self.detection_noise_sigma < 0 or self.camera.scale <= 0:
            raise BadParams("noise sigma must be >= 0 and camera scale > 0")


@dataclass
class SynthSession:
    params: SynthParams
    frames: Optional[np.ndarray]  # (T, H, W, 3) uint8
    gt_trajectory: np.ndarray  # bar elevation, px, up-positive (= -bar center y)
    gt_joints: np.ndarray  # (T, len(JOINTS), 2) image px
    gt_detections: DetectionStream
    label: LabelRecord
    gt_phase: np.ndarray = None


# ---------------------------------------------------------------- kinematics

def _window_weight(t: np.ndarray, period: int, window: str) -> np.ndarray:
    """Smooth 0..1..0 bump over the selected half of each repetition."""
    u = (t % period) / period  # 0 standing, 0.5 deepest
    if window == "both":
        return np.abs(np.sin(2 * np.pi * u))
    in_descent = u < 0.5
    bump = np.sin(2 * np.pi * u) ** 2
    if window == "descent":
        return np.where(in_descent, bump, 0.0)
    return np.where(in_descent, 0.0, bump)


def _hip_height(p: SynthParams, t: np.ndarray) -> np.ndarray:
    s = p.image_size
    leg = p.appearance.leg_link * s
    top = 2 * leg * math.cos(math.radians(14))
    amp = p.amplitude * s
    h = top - amp / 2 * (1 - np.cos(2 * np.pi * t / p.period))
    if p.error.type == "shallow_depth" and p.error.magnitude > 0:
        h = np.maximum(h, top - amp + 0.5 * amp * p.error.magnitude)
    if top - amp < 0.3 * leg:
        raise BadParams("amplitude too large for the leg length")
    return h


def _leg(ankle_x, hip_x, hip_y, leg, side):
    """Knee position of a two-link leg with equal links, bending outward (``side`` = +-1)."""
    dx, dy = hip_x - ankle_x, hip_y
    d = math.hypot(dx, dy)
    if d > 2 * leg:
        raise BadParams("leg over-extended")
    mx, my = ankle_x + dx / 2, dy / 2
    h = math.sqrt(max(leg * leg - d * d / 4, 0.0))
    nx, ny = dy / d, -dx / d  # unit normal
    if nx * side < 0:
        nx, ny = -nx, -ny
    return mx + h * nx, my + h * ny


def figure_joints(p: SynthParams) -> np.ndarray:
    """Joint positions (T, J, 2) in figure coordinates (px at scale 1, y up)."""
    a = p.appearance
    s = p.image_size
    leg = a.leg_link * s
    t = np.arange(p.num_frames, dtype=float)
    hip_y = _hip_height(p, t)
    weight = _window_weight(t, p.period, p.error.phase_window)
    shift = 0.0
    if p.error.type in ("knee_inward", "knee_forward"):
        shift = p.error.magnitude * p.error.max_offset * s
    bar_lift = 0.03 * s

    out = np.zeros((p.num_frames, len(JOINTS), 2))
    for k in range(p.num_frames):
        hips, knees, ankles = [], [], []
        for side in (-1, 1):
            ax = side * a.stance_half * s
            hx = side * a.hip_half * s
            kx, ky = _leg(ax, hx, hip_y[k], leg, side)
            delta = shift * weight[k]
            if delta:
                # move the knee, then re-seat the hip at the same height keeping both links rigid
                kx = kx - side * delta if p.error.type == "knee_inward" else kx + delta
                # near full extension the hip cannot follow a large knee shift; clamp so it can
                reach = math.sqrt(max(leg * leg - max(hip_y[k] - leg, 0.0) ** 2, 0.0))
                kx = ax + float(np.clip(kx - ax, -reach, reach))
                ky = math.sqrt(max(leg * leg - (kx - ax) ** 2, 0.0))
                rise = min(hip_y[k] - ky, leg)
                hx = kx - side * math.sqrt(leg * leg - rise * rise)
            hips.append((hx, hip_y[k]))
            knees.append((kx, ky))
            ankles.append((ax, 0.0))
        mid_x = (hips[0][0] + hips[1][0]) / 2
        sh_y = hip_y[k] + a.torso_len * s
        shoulders = [(mid_x - a.shoulder_half * s, sh_y), (mid_x + a.shoulder_half * s, sh_y)]
        bar_half = (a.shoulder_half + 0.09) * s
        bars = [(mid_x - bar_half, sh_y + bar_lift), (mid_x + bar_half, sh_y + bar_lift)]
        out[k] = [hips[0], hips[1], knees[0], knees[1], ankles[0], ankles[1],
                  shoulders[0], shoulders[1], bars[0], bars[1]]
    return out


def to_image(p: SynthParams, pts: np.ndarray) -> np.ndarray:
    s = p.image_size
    out = np.empty_like(pts, dtype=float)
    out[..., 0] = s / 2 + p.camera.offset_x + p.camera.scale * pts[..., 0]
    out[..., 1] = 0.92 * s - p.camera.scale * pts[..., 1]
    return out


def bar_boxes(p: SynthParams, joints_img: np.ndarray) -> np.ndarray:
    """Bar + plates bounding boxes (T, 4) in image px."""
    plate_w = 0.03 * p.image_size * p.camera.scale
    plate_h = 0.16 * p.image_size * p.camera.scale
    left = joints_img[:, JOINTS.index("bar_l")]
    right = joints_img[:, JOINTS.index("bar_r")]
    yc = left[:, 1]
    return np.stack([left[:, 0] - plate_w, yc - plate_h / 2, right[:, 0] + plate_w, yc + plate_h / 2], axis=1)


# ----------------------------------------------------------------- rendering

def _capsule_coverage(gx, gy, a, b, radius):
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    vv = vx * vx + vy * vy
    if vv > 0:
        u = np.clip(((gx - ax) * vx + (gy - ay) * vy) / vv, 0.0, 1.0)
    else:
        u = 0.0
    d = np.hypot(gx - (ax + u * vx), gy - (ay + u * vy))
    return np.clip(radius - d + 0.5, 0.0, 1.0)


def _paint(canvas, cov, color):
    canvas += cov[..., None] * (np.asarray(color, dtype=float) - canvas)


def render_frame(p: SynthParams, joints_img: np.ndarray, box: np.ndarray) -> np.ndarray:
    s = p.image_size
    a = p.appearance
    sc = p.camera.scale
    w = a.limb_width * sc * s / 128
    gy, gx = np.mgrid[0:s, 0:s].astype(float) + 0.5
    canvas = np.empty((s, s, 3))
    canvas[:] = a.background
    j = {name: joints_img[i] for i, name in enumerate(JOINTS)}

    for side in ("l", "r"):
        _paint(canvas, _capsule_coverage(gx, gy, j[f"ankle_{side}"], j[f"knee_{side}"], w), a.legs)
        _paint(canvas, _capsule_coverage(gx, gy, j[f"knee_{side}"], j[f"hip_{side}"], w), a.legs)
    mid_hip = (j["hip_l"] + j["hip_r"]) / 2
    mid_sh = (j["shoulder_l"] + j["shoulder_r"]) / 2
    _paint(canvas, _capsule_coverage(gx, gy, j["hip_l"], j["hip_r"], w), a.legs)
    _paint(canvas, _capsule_coverage(gx, gy, mid_hip, mid_sh, 2.2 * w), a.torso)
    _paint(canvas, _capsule_coverage(gx, gy, j["shoulder_l"], j["shoulder_r"], w), a.torso)
    for side, sign in (("l", -1), ("r", 1)):
        elbow = j[f"shoulder_{side}"] + np.array([sign * 0.05 * s * sc, 0.05 * s * sc])
        hand = j[f"bar_{side}"] + np.array([-sign * 0.06 * s * sc, 0.0])
        _paint(canvas, _capsule_coverage(gx, gy, j[f"shoulder_{side}"], elbow, 0.8 * w), a.skin)
        _paint(canvas, _capsule_coverage(gx, gy, elbow, hand, 0.8 * w), a.skin)
    head = mid_sh + np.array([0.0, -0.07 * s * sc])
    _paint(canvas, _capsule_coverage(gx, gy, head, head, 0.045 * s * sc), a.skin)
    _paint(canvas, _capsule_coverage(gx, gy, j["bar_l"], j["bar_r"], 0.6 * w), a.bar)
    x1, y1, x2, y2 = box
    pw = (x2 - x1 - (j["bar_r"][0] - j["bar_l"][0])) / 2
    for xc in (x1 + pw / 2, x2 - pw / 2):
        _paint(canvas, _capsule_coverage(gx, gy, (xc, y1 + pw / 2), (xc, y2 - pw / 2), pw / 2), a.bar)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


# ------------------------------------------------------------------ sessions

def generate_session(params: SynthParams, render: bool = True) -> SynthSession:
    """Render one session. Deterministic given ``params``.

    ``render=False`` skips rasterization (``frames`` is None) for callers that
    only need the ground truth and detections.
    """
    params.validate()
    joints = to_image(params, figure_joints(params))
    boxes = bar_boxes(params, joints)
    frames = None
    if render:
        frames = np.stack([render_frame(params, joints[k], boxes[k]) for k in range(params.num_frames)])
    bar_y = joints[:, JOINTS.index("bar_l"), 1]
    gt = -bar_y

    rng = np.random.default_rng(params.seed)
    noise = rng.normal(0.0, params.detection_noise_sigma, size=(params.num_frames, 2))
    if params.detection_noise_sigma == 0:
        noise[:] = 0.0
    det = [Box(b[0] + n[0], b[1] + n[1], b[2] + n[0], b[3] + n[1], 1.0) for b, n in zip(boxes, noise)]
    stream = DetectionStream(params.video_id, det, "synthgen")

    err = params.error
    positive = err.type != "none" and err.magnitude > 0
    label = LabelRecord(params.video_id, ERROR_LABELS[err.type], int(positive), "synthgen")
    lo, hi = gt.min(), gt.max()
    phase = -180.0 + 360.0 * (gt - lo) / (hi - lo)
    return SynthSession(params, frames, gt, joints, stream, label, phase)


@dataclass(frozen=True)
class CorpusVariation:
    """Per-video ranges; each video draws uniformly inside them."""

    offset_x: tuple = (-0.06, 0.06)  # fraction of image size
    scale: tuple = (0.9, 1.05)
    period: tuple = (36, 44)
    magnitude: tuple = (0.7, 1.0)
    random_colors: bool = True
    appearance_presets: Optional[tuple] = None


def random_appearance(rng, base: Appearance) -> Appearance:
    def color(lo, hi):
        return tuple(int(v) for v in rng.integers(lo, hi, size=3))

    return replace(base, background=color(150, 256), legs=color(0, 120), torso=color(60, 230),
                   skin=color(150, 256), limb_width=float(rng.uniform(1.8, 2.6)))


def corpus_params(n_videos: int, template: SynthParams = SynthParams(),
                  variation: CorpusVariation = CorpusVariation(), seed: int = 0,
                  error_ratio: float = 0.5, error_type: str = "knee_inward",
                  prefix: str = "syn") -> list[SynthParams]:
    """Per-video parameters of a corpus.

    Exactly ``floor(error_ratio * n + 0.5)`` videos get a non-zero error of
    ``error_type``; which ones is a seeded permutation. Clean videos keep
    ``error_type`` with magnitude 0 so their label names the same error.
    """
    if n_videos < 1:
        raise BadParams("n_videos must be >= 1")
    if not 0 <= error_ratio <= 1:
        raise BadParams("error_ratio must be in [0, 1]")
    n_err = math.floor(error_ratio * n_videos + 0.5)
    erroneous = set(np.random.default_rng(seed).permutation(n_videos)[:n_err].tolist())
    out = []
    for i in range(n_videos):
        rng = np.random.default_rng([seed, i])
        period = int(rng.integers(variation.period[0], variation.period[1] + 1))
        reps = template.repetitions
        s = template.image_size
        appearance = template.appearance
        if variation.appearance_presets:
            appearance = variation.appearance_presets[i % len(variation.appearance_presets)]
        elif variation.random_colors:
            appearance = random_appearance(rng, template.appearance)
        mag = float(rng.uniform(*variation.magnitude))
        err = replace(template.error, type=error_type, magnitude=mag if i in erroneous else 0.0)
        out.append(replace(
            template,
            video_id=f"{prefix}_{i:04d}",
            period=period,
            num_frames=period * reps,
            appearance=appearance,
            camera=Camera(offset_x=float(rng.uniform(*variation.offset_x)) * s,
                          scale=float(rng.uniform(*variation.scale))),
            error=err,
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return out


def write_session(session: SynthSession, out_dir) -> VideoRecord:
    """Write frames as numbered PNGs plus ground-truth arrays; returns the video record."""
    out_dir = Path(out_dir)
    p = session.params
    rel = Path("frames") / p.video_id
    try:
        (out_dir / rel).mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(session.frames):
            Image.fromarray(frame).save(out_dir / rel / f"frame_{k:05d}.png", format="PNG")
        gt_dir = out_dir / "gt"
        gt_dir.mkdir(parents=True, exist_ok=True)
        np.save(gt_dir / f"{p.video_id}_trajectory.npy", session.gt_trajectory)
        np.save(gt_dir / f"{p.video_id}_joints.npy", session.gt_joints)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return VideoRecord(p.video_id, p.num_frames, p.fps, (p.image_size, p.image_size),
                       rel.as_posix(), "Synthetic")


def generate_corpus(out_dir, n_videos: int, template: SynthParams = SynthParams(),
                    variation: CorpusVariation = CorpusVariation(), seed: int = 0,
                    error_ratio: float = 0.5, error_type: str = "knee_inward",
                    prefix: str = "syn", jobs: int = 1):
    """Render a corpus to ``out_dir`` in the ingest formats.

    Writes ``manifest.jsonl``, ``detections.jsonl``, ``frames/<video_id>/`` and
    ``gt/``. Returns ``(manifest_path, videos, labels)``.
    """
    params = corpus_params(n_videos, template, variation, seed, error_ratio, error_type, prefix)
    out_dir = Path(out_dir)

    def work(p):
        sess = generate_session(p)
        return write_session(sess, out_dir), sess.label, sess.gt_detections

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(work, params))
    else:
        results = [work(p) for p in params]
    videos = [r[0] for r in results]
    labels = [r[1] for r in results]
    try:
        write_detections(out_dir / "detections.jsonl", [r[2] for r in results])
        write_manifest(out_dir / "manifest.jsonl", videos, labels)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return out_dir / "manifest.jsonl", videos, labels


def limb_lengths(joints: np.ndarray) -> np.ndarray:
    """(T, len(LINKS)) link lengths, for rigidity checks."""
    idx = [(JOINTS.index(a), JOINTS.index(b)) for a, b in LINKS]
    return np.stack([np.linalg.norm(joints[:, i] - joints[:, j], axis=-1) for i, j in idx], axis=1)
