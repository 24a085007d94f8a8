"""Dataset manifests, detection streams, frame access and dataset splits.

File formats
------------
Manifest (JSON lines), one record per line. Video lines carry
``video_id, frame_count, fps, height, width, path, exercise``; label lines
carry ``video_id, error_type, label, annotator``.

Detection stream (JSON lines): ``{"video_id", "frame", "box": [x1, y1, x2, y2]
| null, "conf"}``. Missing detections are explicit nulls so frame indices stay
aligned with the video.

Split assignment (CSV): header ``video_id,split``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadFractions,
    DecodeFailure,
    DuplicateId,
    IndexOutOfRange,
    MissingFile,
    SchemaViolation,
    TooFewSamples,
)

EXERCISES = ("BackSquat", "BarbellRow", "OverheadPress", "Synthetic")
ERROR_TYPES = ("KIE", "KFE", "ShallowSquat", "Lumbar", "TorsoAngle", "OHP_Knee", "OHP_Elbow", "Clean")
SPLITS = ("train", "val", "test")

VIDEO_KEYS = ("video_id", "frame_count", "fps", "height", "width", "path", "exercise")
LABEL_KEYS = ("video_id", "error_type", "label", "annotator")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    frame_count: int
    fps: float
    frame_size: tuple  # (height, width)
    source_path: str
    exercise: str = "Synthetic"

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        if not self.fps > 0:
            raise ValueError("fps must be > 0")
        if min(self.frame_size) < 1:
            raise ValueError("frame height and width must be >= 1")
        if self.exercise not in EXERCISES:
            raise ValueError(f"unknown exercise {self.exercise!r}")

    def to_json(self) -> dict:
        h, w = self.frame_size
        return {
            "video_id": self.video_id,
            "frame_count": self.frame_count,
            "fps": self.fps,
            "height": h,
            "width": w,
            "path": self.source_path,
            "exercise": self.exercise,
        }


@dataclass(frozen=True)
class LabelRecord:
    video_id: str
    error_type: str
    label: int
    annotator: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.error_type not in ERROR_TYPES:
            raise ValueError(f"unknown error_type {self.error_type!r}")

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "error_type": self.error_type,
            "label": self.label,
            "annotator": self.annotator,
        }


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float
    conf: float = 1.0


@dataclass
class DetectionStream:
    video_id: str
    boxes: list  # list[Optional[Box]], one entry per frame
    detector_name: str = ""

    def __post_init__(self):
        for i, b in enumerate(self.boxes):
            if b is None:
                continue
            if not (b.x1 < b.x2 and b.y1 < b.y2):
                raise ValueError(f"frame {i}: degenerate box {tuple(b)}")
            if not 0.0 <= b.conf <= 1.0:
                raise ValueError(f"frame {i}: confidence {b.conf} outside [0, 1]")

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class SplitAssignment:
    video_id: str
    split: str


# ---------------------------------------------------------------- manifests

def _require(obj, key, line, kind):
    if key not in obj:
        raise SchemaViolation(line, key)
    value = obj[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaViolation(line, key, "must be an integer")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaViolation(line, key, "must be a number")
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            raise SchemaViolation(line, key, "must be a string")
    return value


def _parse_video(obj, line):
    vals = {
        "video_id": _require(obj, "video_id", line, str),
        "frame_count": _require(obj, "frame_count", line, int),
        "fps": _require(obj, "fps", line, float),
        "height": _require(obj, "height", line, int),
        "width": _require(obj, "width", line, int),
        "path": _require(obj, "path", line, str),
        "exercise": _require(obj, "exercise", line, str),
    }
    for key, ok in (
        ("frame_count", vals["frame_count"] >= 1),
        ("fps", vals["fps"] > 0),
        ("height", vals["height"] >= 1),
        ("width", vals["width"] >= 1),
        ("exercise", vals["exercise"] in EXERCISES),
    ):
        if not ok:
            raise SchemaViolation(line, key, "out of range")
    return VideoRecord(
        vals["video_id"], vals["frame_count"], vals["fps"],
        (vals["height"], vals["width"]), vals["path"], vals["exercise"],
    )


def _parse_label(obj, line):
    video_id = _require(obj, "video_id", line, str)
    error_type = _require(obj, "error_type", line, str)
    label = _require(obj, "label", line, int)
    annotator = obj.get("annotator", "")
    if error_type not in ERROR_TYPES:
        raise SchemaViolation(line, "error_type", "not a known error type")
    if label not in (0, 1):
        raise SchemaViolation(line, "label", "must be 0 or 1")
    if not isinstance(annotator, str):
        raise SchemaViolation(line, "annotator", "must be a string")
    return LabelRecord(video_id, error_type, label, annotator)


def load_manifest(path) -> tuple[list[VideoRecord], list[LabelRecord]]:
    """Read a JSON-lines manifest into video and label records.

    Line numbers in errors are 1-based. Blank lines are ignored.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    videos, labels = [], []
    seen = defaultdict(list)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError:
                raise SchemaViolation(lineno, "<line>", "is not valid JSON") from None
            if not isinstance(obj, dict):
                raise SchemaViolation(lineno, "<line>", "is not a JSON object")
            if "error_type" in obj:
                labels.append(_parse_label(obj, lineno))
            else:
                rec = _parse_video(obj, lineno)
                seen[rec.video_id].append(lineno)
                videos.append(rec)
    for vid, lines in seen.items():
        if len(lines) > 1:
            raise DuplicateId(vid, lines)
    return videos, labels


def write_manifest(path, videos: Iterable[VideoRecord], labels: Iterable[LabelRecord] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in videos:
            fh.write(json.dumps(rec.to_json()) + "\n")
        for rec in labels:
            fh.write(json.dumps(rec.to_json()) + "\n")


# ---------------------------------------------------------- detection files

def write_detections(path, streams: Iterable[DetectionStream]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in streams:
            for i, b in enumerate(s.boxes):
                if b is None:
                    row = {"video_id": s.video_id, "frame": i, "box": None, "conf": None}
                else:
                    row = {"video_id": s.video_id, "frame": i,
                           "box": [b.x1, b.y1, b.x2, b.y2], "conf": b.conf}
                fh.write(json.dumps(row) + "\n")


def load_detections(path, detector_name: str = "") -> dict[str, DetectionStream]:
    """Read a detection file into one stream per video, keyed by video_id.

    Frames not listed for a video are treated as missing.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    per_video: dict[str, dict[int, Optional[Box]]] = defaultdict(dict)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError:
                raise SchemaViolation(lineno, "<line>", "is not valid JSON") from None
            vid = _require(obj, "video_id", lineno, str)
            frame = _require(obj, "frame", lineno, int)
            if frame < 0:
                raise SchemaViolation(lineno, "frame", "must be >= 0")
            box = obj.get("box")
            if box is None:
                per_video[vid][frame] = None
                continue
            if not (isinstance(box, list) and len(box) == 4):
                raise SchemaViolation(lineno, "box", "must be [x1, y1, x2, y2] or null")
            conf = obj.get("conf")
            conf = 1.0 if conf is None else float(conf)
            b = Box(*map(float, box), conf)
            if not (b.x1 < b.x2 and b.y1 < b.y2):
                raise SchemaViolation(lineno, "box", "needs x1 < x2 and y1 < y2")
            if not 0.0 <= conf <= 1.0:
                raise SchemaViolation(lineno, "conf", "must be in [0, 1]")
            per_video[vid][frame] = b
    streams = {}
    for vid, frames in per_video.items():
        n = max(frames) + 1
        streams[vid] = DetectionStream(vid, [frames.get(i) for i in range(n)], detector_name)
    return streams


# ------------------------------------------------------------------- frames

def _frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))


def _resize_center_crop(img: Image.Image, size: int, resize: int) -> np.ndarray:
    w, h = img.size
    scale = resize / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    if (nw, nh) != (w, h):
        img = img.resize((nw, nh), Image.BILINEAR)
    left, top = (nw - size) // 2, (nh - size) // 2
    return np.asarray(img.crop((left, top, left + size, top + size)), dtype=np.uint8)


def read_frames(record: VideoRecord, indices: Sequence[int], size: int = 224,
                resize: Optional[int] = None, root=None) -> np.ndarray:
    """Decode frames ``indices`` of a video as an (N, size, size, 3) uint8 stack.

    Frames are resized so the shorter side equals ``resize`` (default: ``size``)
    and then center-cropped to ``size``. ``record.source_path`` is either a
    directory of numbered image files or a ``.npy`` array of shape (T, H, W, 3);
    relative paths are resolved against ``root``.
    """
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < record.frame_count:
            raise IndexOutOfRange(f"{record.video_id}: frame {i} not in [0, {record.frame_count})")
    resize = size if resize is None else resize
    src = Path(record.source_path)
    if root is not None and not src.is_absolute():
        src = Path(root) / src
    out = np.empty((len(indices), size, size, 3), dtype=np.uint8)
    try:
        if src.suffix == ".npy":
            stack = np.load(src, mmap_mode="r")
            for k, i in enumerate(indices):
                out[k] = _resize_center_crop(Image.fromarray(np.asarray(stack[i])), size, resize)
        else:
            files = _frame_files(src)
            for k, i in enumerate(indices):
                with Image.open(files[i]) as img:
                    out[k] = _resize_center_crop(img.convert("RGB"), size, resize)
    except (OSError, ValueError, IndexError) as exc:
        raise DecodeFailure(f"{record.video_id}: {exc}") from exc
    return out


class FrameStore:
    """Caches whole decoded videos so training loops can index frames cheaply.

    Only suitable for desk-scale corpora that fit in memory.
    """

    def __init__(self, records: Iterable[VideoRecord], size: int = 224,
                 resize: Optional[int] = None, root=None):
        self.records = {r.video_id: r for r in records}
        self.size = size
        self.resize = resize
        self.root = root
        self._cache: dict[str, np.ndarray] = {}

    def video(self, video_id: str) -> np.ndarray:
        if video_id not in self._cache:
            rec = self.records[video_id]
            self._cache[video_id] = read_frames(
                rec, range(rec.frame_count), self.size, self.resize, self.root)
        return self._cache[video_id]

    def __call__(self, video_id: str, indices) -> np.ndarray:
        frames = self.video(video_id)
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(frames)):
            raise IndexOutOfRange(f"{video_id}: indices outside [0, {len(frames)})")
        return frames[idx]

    def frame_count(self, video_id: str) -> int:
        return self.records[video_id].frame_count


# ------------------------------------------------------------------- splits

def _check_fractions(fractions):
    if len(fractions) != 3 or any(not f > 0 for f in fractions):
        raise BadFractions(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must sum to 1, got {sum(fractions)}")


def _allocate(n: int, fractions) -> tuple[int, int, int]:
    # floor per split, leftovers to train; the epsilon guards 0.7 * 10 = 6.999...
    val = math.floor(fractions[1] * n + 1e-9)
    test = math.floor(fractions[2] * n + 1e-9)
    train = n - val - test
    return train, val, test


def split_dataset(records: Sequence[LabelRecord], fractions=(0.7, 0.15, 0.15), seed: int = 0,
                  stratify: bool = True) -> list[SplitAssignment]:
    """Assign every labeled video to train/val/test.

    With ``stratify`` each (error_type, label) stratum is split on its own, so
    per-error imbalance ratios carry over to every split. Videos with several
    label records are stratified on the sorted tuple of their labels. Within a
    stratum, ids are sorted and then shuffled by a generator seeded with
    ``seed``; counts are ``floor(fraction * n)`` for val and test with the
    remainder going to train. Output is sorted by video_id.
    """
    _check_fractions(fractions)
    by_video = defaultdict(set)
    for r in records:
        by_video[r.video_id].add((r.error_type, r.label))
    if len(by_video) < 3:
        raise TooFewSamples(f"need at least 3 labeled videos, got {len(by_video)}")

    strata = defaultdict(list)
    for vid, labs in by_video.items():
        key = tuple(sorted(labs)) if stratify else ()
        strata[key].append(vid)

    rng = np.random.default_rng(seed)
    assignment = {}
    for key in sorted(strata):
        ids = sorted(strata[key])
        order = rng.permutation(len(ids))
        n_train, n_val, _ = _allocate(len(ids), fractions)
        for rank, j in enumerate(order):
            if rank < n_train:
                split = "train"
            elif rank < n_train + n_val:
                split = "val"
            else:
                split = "test"
            assignment[ids[j]] = split
    return [SplitAssignment(vid, assignment[vid]) for vid in sorted(assignment)]


def write_splits(path, splits: Iterable[SplitAssignment]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "split"])
        for s in splits:
            w.writerow([s.video_id, s.split])


def load_splits(path) -> list[SplitAssignment]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with path.open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for lineno, row in enumerate(rows, start=2):
        if row.get("split") not in SPLITS:
            raise SchemaViolation(lineno, "split", "must be train, val or test")
        out.append(SplitAssignment(row["video_id"], row["split"]))
    return out
