"""Barbell trajectories: detection centers -> smoothed elevation -> phase.

Elevation is up-positive (negated image y). Phase maps elevation affinely to
[-180, 180] with the bottom of the lift at -180. Half-cycles are the monotone
runs between hysteresis-confirmed extrema; a repetition is a descent followed
immediately by an ascent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateTrajectory, GapTooLong, MissingFile, TooFewDetections
from .ingest import DetectionStream

DESCENT = "descent"
ASCENT = "ascent"


@dataclass
class Trajectory:
    video_id: str
    elevation_raw: np.ndarray  # px, NaN where no detection
    phase: np.ndarray
    valid_mask: np.ndarray

    def __len__(self):
        return len(self.phase)


@dataclass(frozen=True)
class HalfCycle:
    video_id: str
    start: int
    end: int  # exclusive
    direction: str

    @property
    def frame_range(self) -> tuple[int, int]:
        return self.start, self.end

    def __len__(self):
        return self.end - self.start


@dataclass(frozen=True)
class Repetition:
    video_id: str
    descent: HalfCycle
    ascent: HalfCycle

    @property
    def frame_range(self) -> tuple[int, int]:
        return self.descent.start, self.ascent.end


def centers_to_elevation(stream: DetectionStream) -> np.ndarray:
    """Per-frame elevation ``-(y1 + y2) / 2``; NaN for missing boxes."""
    out = np.full(len(stream.boxes), np.nan)
    for i, b in enumerate(stream.boxes):
        if b is not None:
            out[i] = -(b.y1 + b.y2) / 2.0
    return out


def _as_float(values) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=float)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically-truncated at the edges."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    x = np.asarray(x, dtype=float)
    n = len(x)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def interpolate_and_smooth(elevations, window: int = 5, max_gap: int = 15) -> np.ndarray:
    """Fill missing frames and smooth.

    Interior gaps are linearly interpolated, leading/trailing gaps hold the
    nearest detection, then a centered moving average of length ``window`` is
    applied. Any run of ``max_gap`` or more missing frames raises GapTooLong.
    """
    e = _as_float(elevations)
    present = ~np.isnan(e)
    if present.sum() < 2:
        raise TooFewDetections(f"need at least 2 detections, got {int(present.sum())}")

    run_start = None
    for i, ok in enumerate(np.append(present, True)):
        if not ok and run_start is None:
            run_start = i
        elif ok and run_start is not None:
            if i - run_start >= max_gap:
                raise GapTooLong(run_start, i - run_start)
            run_start = None

    frames = np.arange(len(e))
    filled = np.interp(frames, frames[present], e[present])
    return moving_average(filled, window)


def normalize_amplitude(elevations, epsilon_range: float = 1.0, bottom: float = -180.0) -> np.ndarray:
    """Map elevation affinely onto [-180, 180].

    The lowest elevation goes to ``bottom`` (-180 by default; pass 180 to put
    the top of the lift at -180 instead).
    """
    e = np.asarray(elevations, dtype=float)
    lo, hi = e.min(), e.max()
    if not hi - lo > epsilon_range:
        raise DegenerateTrajectory(f"elevation range {hi - lo:.3g} px <= {epsilon_range}")
    unit = (e - lo) / (hi - lo)
    if bottom < 0:
        return -180.0 + 360.0 * unit
    return 180.0 - 360.0 * unit


def find_extrema(phase, hysteresis: float = 20.0) -> list[int]:
    """Frame indices of turning points, confirmed once the signal retraces ``hysteresis``.

    The list starts at the extremum the first confirmed move departs from
    (wiggles smaller than ``hysteresis`` before it are ignored) and ends with
    the final running extremum, so consecutive entries delimit monotone runs.
    Returns ``[]`` when the signal never moves by ``hysteresis``.
    """
    p = np.asarray(phase, dtype=float)
    n = len(p)
    lo = hi = 0
    direction = 0
    extrema: list[int] = []
    cand = 0
    for i in range(1, n):
        if direction == 0:
            if p[i] < p[lo]:
                lo = i
            if p[i] > p[hi]:
                hi = i
            if p[i] - p[lo] >= hysteresis:
                direction, cand, extrema = 1, i, [lo]
            elif p[hi] - p[i] >= hysteresis:
                direction, cand, extrema = -1, i, [hi]
        elif direction == 1:
            if p[i] > p[cand]:
                cand = i
            elif p[cand] - p[i] >= hysteresis:
                extrema.append(cand)
                direction, cand = -1, i
        else:
            if p[i] < p[cand]:
                cand = i
            elif p[i] - p[cand] >= hysteresis:
                extrema.append(cand)
                direction, cand = 1, i
    if direction != 0:
        extrema.append(cand)
    return extrema


def segment_half_cycles(phase, hysteresis: float = 20.0, video_id: str = "") -> list[HalfCycle]:
    """Split a phase series into alternating descent/ascent half-cycles.

    Boundaries sit on extrema; each half-cycle ``[start, end)`` begins at one
    extremum and stops just before the next, except the last, which includes
    the final extremum. Runs shorter than 2 frames are merged into their
    neighbour. A monotone input yields a single half-cycle.
    """
    p = np.asarray(phase, dtype=float)
    ext = find_extrema(p, hysteresis)
    if len(ext) < 2:
        return []
    # merge too-short runs by dropping the interior boundary
    bounds = list(ext)
    changed = True
    while changed and len(bounds) > 2:
        changed = False
        for k in range(len(bounds) - 1):
            last = k == len(bounds) - 2
            length = bounds[k + 1] - bounds[k] + (1 if last else 0)
            if length < 2:
                del bounds[k if last else k + 1]
                changed = True
                break
    cycles = []
    for k in range(len(bounds) - 1):
        start = bounds[k]
        end = bounds[k + 1] + (1 if k == len(bounds) - 2 else 0)
        direction = ASCENT if p[bounds[k + 1]] > p[start] else DESCENT
        if end - start >= 2:
            cycles.append(HalfCycle(video_id, start, end, direction))
    return cycles


def segment_repetitions(half_cycles: Sequence[HalfCycle]) -> list[Repetition]:
    """Pair each descent with the ascent that immediately follows it."""
    reps = []
    k = 0
    while k < len(half_cycles) - 1:
        a, b = half_cycles[k], half_cycles[k + 1]
        if a.direction == DESCENT and b.direction == ASCENT and a.end == b.start:
            reps.append(Repetition(a.video_id, a, b))
            k += 2
        else:
            k += 1
    return reps


def parabola_fit_rmse(phase, half_cycle: HalfCycle) -> float:
    """RMSE of a least-squares quadratic fit over one half-cycle (quality diagnostic)."""
    y = np.asarray(phase, dtype=float)[half_cycle.start:half_cycle.end]
    t = np.arange(len(y), dtype=float)
    coef = np.polyfit(t, y, deg=min(2, len(y) - 1))
    return float(np.sqrt(np.mean((np.polyval(coef, t) - y) ** 2)))


def extract_trajectory(stream: DetectionStream, window: int = 5, max_gap: int = 15,
                       hysteresis: float = 20.0, epsilon_range: float = 1.0,
                       per_repetition: bool = True, bottom: float = -180.0):
    """Full pipeline for one video.

    Returns ``(trajectory, half_cycles, repetitions)``. With ``per_repetition``
    the phase is renormalized inside every repetition's frame range so each
    repetition spans the full [-180, 180]; frames outside any repetition keep
    the per-video normalization.
    """
    raw = centers_to_elevation(stream)
    smooth = interpolate_and_smooth(raw, window, max_gap)
    phase = normalize_amplitude(smooth, epsilon_range, bottom)
    halves = segment_half_cycles(phase, hysteresis, stream.video_id)
    reps = segment_repetitions(halves)
    if per_repetition and reps:
        phase = phase.copy()
        for rep in reps:
            s, e = rep.frame_range
            try:
                phase[s:e] = normalize_amplitude(smooth[s:e], epsilon_range, bottom)
            except DegenerateTrajectory:
                pass
    traj = Trajectory(stream.video_id, raw, phase, ~np.isnan(raw))
    return traj, halves, reps


# ---------------------------------------------------------------------- I/O

def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for tr in trajectories:
            for i, (ph, ok) in enumerate(zip(tr.phase, tr.valid_mask)):
                fh.write(json.dumps({"video_id": tr.video_id, "frame": i,
                                     "phase": float(ph), "valid": bool(ok)}) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    """Inverse of :func:`write_trajectories`. ``elevation_raw`` is not stored and comes back as NaN."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    rows: dict[str, list] = {}
    with path.open("r", encoding="utf-8") as fh:
        for raw in fh:
            if raw.strip():
                o = json.loads(raw)
                rows.setdefault(o["video_id"], []).append((o["frame"], o["phase"], o["valid"]))
    out = []
    for vid, items in rows.items():
        items.sort()
        phase = np.array([r[1] for r in items], dtype=float)
        valid = np.array([r[2] for r in items], dtype=bool)
        out.append(Trajectory(vid, np.full(len(phase), np.nan), phase, valid))
    return out


def write_half_cycles(path, half_cycles: Iterable[HalfCycle]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for h in half_cycles:
            fh.write(json.dumps({"video_id": h.video_id, "start": h.start, "end": h.end,
                                 "direction": h.direction}) + "\n")


def load_half_cycles(path) -> list[HalfCycle]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with path.open("r", encoding="utf-8") as fh:
        return [HalfCycle(o["video_id"], o["start"], o["end"], o["direction"])
                for o in map(json.loads, filter(str.strip, fh))]


def write_repetitions(path, reps: Iterable[Repetition]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in reps:
            fh.write(json.dumps({"video_id": r.video_id,
                                 "descent": [r.descent.start, r.descent.end],
                                 "ascent": [r.ascent.start, r.ascent.end]}) + "\n")


def load_repetitions(path) -> list[Repetition]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for o in map(json.loads, filter(str.strip, fh)):
            v = o["video_id"]
            out.append(Repetition(v, HalfCycle(v, *o["descent"], DESCENT),
                                  HalfCycle(v, *o["ascent"], ASCENT)))
    return out
