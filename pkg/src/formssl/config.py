"""Pipeline configuration: defaults, schema validation, overrides, hashing and seeds.

Configs are TOML files with one table per stage. Anything not given keeps
its default; ``--set section.key=value`` overrides are applied last, with the
value parsed as a TOML literal (bare words fall back to strings). The merged
result is validated against :data:`SCHEMA` before any work starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Iterable, Optional

import jsonschema

from .errors import ConfigInvalid, MissingFile

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict = {
    "seed": 0,
    "out": "run",
    "jobs": 1,
    "deterministic": False,
    "synth": {
        "n_videos": 40,
        "image_size": 128,
        "repetitions": 2,
        "period_min": 36,
        "period_max": 44,
        "amplitude": 0.25,
        "error_type": "knee_inward",
        "error_ratio": 0.5,
        "magnitude_min": 0.7,
        "magnitude_max": 1.0,
        "max_offset": 0.07,
        "phase_window": "ascent",
        "noise_sigma": 0.0,
        "appearance_presets": 0,
    },
    "trajectory": {
        "window": 5,
        "max_gap": 15,
        "hysteresis": 20.0,
        "epsilon_range": 1.0,
        "per_repetition": True,
        "bottom": -180.0,
    },
    "splits": {
        "fractions": [0.7, 0.15, 0.15],
        "stratify": True,
    },
    "triplets": {
        "mode": "cvcspc",
        "delta": 30.0,
        "epsilon_pos": 5.0,
        "per_anchor": 1,
        "anchor_stride": 1,
        "cross_video_negatives": False,
        "max_triplets": 0,
        "num_frames": 16,
    },
    "cvcspc": {
        "encoder": "resnet18",
        "embedding_dim": 128,
        "image_size": 224,
        "resize": 320,
        "lr": 1e-4,
        "epochs": 100,
        "batch_size": 25,
        "l2_normalize": False,
        "augment": False,
        "init_weights": "",
    },
    "md": {
        "encoder": "r2plus1d18",
        "embedding_dim": 128,
        "image_size": 112,
        "resize": 112,
        "lr": 1e-4,
        "epochs": 20,
        "batch_size": 5,
        "l2_normalize": False,
        "init_weights": "",
    },
    "pad": {
        "encoder": "resnet18",
        "image_size": 224,
        "resize": 224,
        "lr": 1e-4,
        "epochs": 500,
        "batch_size": 25,
        "pose_dim": 32,
        "appearance_dim": 256,
        "pairs_per_video": 4,
        "init_weights": "",
    },
    "features": {
        "checkpoint": "cvcspc",
        "target_frames": 200,
        "mode": "uniform",
    },
    "detector": {
        "features": "cvcspc",
        "error_type": "",
        "blocks": 3,
        "channels": 64,
        "kernel": 7,
        "pooling": "mean",
        "dropout": 0.0,
        "epochs": 60,
        "batch_size": 8,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "threshold": 0.5,
        "threshold_sweep": False,
        "shuffle_labels": False,
    },
    "static": {
        "checkpoint": "cvcspc",
        "error_type": "",
        "frames_per_video": 4,
        "epochs": 10,
        "batch_size": 16,
        "lr": 1e-4,
        "weight_decay": 0.0,
        "freeze_backbone": False,
        "threshold": 0.5,
    },
    "ensemble": {
        "a": "cvcspc",
        "b": "vanilla_pc",
        "method": "mean",
    },
    "visualize": {
        "checkpoint": "cvcspc",
        "video_id": "",
        "frame": 0,
        "alpha": 0.5,
    },
}

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_NONNEG_NUM = {"type": "number", "minimum": 0}
_FRAC = {"type": "number", "minimum": 0, "maximum": 1}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}
_IMAGE_ENCODER = {"enum": ["tiny", "resnet18"]}
_TASK_REF = {"type": "string", "minLength": 1}


def _table(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "formssl pipeline configuration",
    **_table({
        "seed": _NONNEG_INT,
        "out": _STR,
        "jobs": _POS_INT,
        "deterministic": _BOOL,
        "synth": _table({
            "n_videos": _POS_INT, "image_size": {"type": "integer", "minimum": 32},
            "repetitions": _POS_INT, "period_min": {"type": "integer", "minimum": 8},
            "period_max": {"type": "integer", "minimum": 8}, "amplitude": _POS_NUM,
            "error_type": {"enum": ["none", "knee_inward", "knee_forward", "shallow_depth"]},
            "error_ratio": _FRAC, "magnitude_min": _FRAC, "magnitude_max": _FRAC,
            "max_offset": _NONNEG_NUM, "phase_window": {"enum": ["ascent", "descent", "both"]},
            "noise_sigma": _NONNEG_NUM, "appearance_presets": _NONNEG_INT,
        }),
        "trajectory": _table({
            "window": {"type": "integer", "minimum": 1}, "max_gap": _POS_INT, "hysteresis": _POS_NUM,
            "epsilon_range": _NONNEG_NUM, "per_repetition": _BOOL, "bottom": {"enum": [-180, 180]},
        }),
        "splits": _table({
            "fractions": {"type": "array", "items": _POS_NUM, "minItems": 3, "maxItems": 3},
            "stratify": _BOOL,
        }),
        "triplets": _table({
            "mode": {"enum": ["cvcspc", "vanilla"]}, "delta": _NONNEG_NUM, "epsilon_pos": _NONNEG_NUM,
            "per_anchor": _POS_INT, "anchor_stride": _POS_INT, "cross_video_negatives": _BOOL,
            "max_triplets": _NONNEG_INT, "num_frames": {"type": "integer", "minimum": 2},
        }),
        "cvcspc": _table({
            "encoder": _IMAGE_ENCODER, "embedding_dim": {"type": "integer", "minimum": 8},
            "image_size": _POS_INT, "resize": _POS_INT, "lr": _POS_NUM, "epochs": _NONNEG_INT,
            "batch_size": _POS_INT, "l2_normalize": _BOOL, "augment": _BOOL, "init_weights": _STR,
        }),
        "md": _table({
            "encoder": {"enum": ["tiny", "r2plus1d18"]}, "embedding_dim": {"type": "integer", "minimum": 8},
            "image_size": _POS_INT, "resize": _POS_INT, "lr": _POS_NUM, "epochs": _NONNEG_INT,
            "batch_size": _POS_INT, "l2_normalize": _BOOL, "init_weights": _STR,
        }),
        "pad": _table({
            "encoder": _IMAGE_ENCODER, "image_size": {"type": "integer", "minimum": 16, "multipleOf": 16},
            "resize": _POS_INT, "lr": _POS_NUM, "epochs": _NONNEG_INT, "batch_size": _POS_INT,
            "pose_dim": _POS_INT, "appearance_dim": _POS_INT, "pairs_per_video": _POS_INT,
            "init_weights": _STR,
        }),
        "features": _table({
            "checkpoint": _TASK_REF, "target_frames": _POS_INT, "mode": {"enum": ["uniform", "window"]},
        }),
        "detector": _table({
            "features": _TASK_REF, "error_type": _STR, "blocks": _POS_INT, "channels": _POS_INT,
            "kernel": {"type": "integer", "minimum": 1, "not": {"multipleOf": 2}},
            "pooling": {"enum": ["mean", "max"]}, "dropout": {"type": "number", "minimum": 0, "maximum": 0.99},
            "epochs": _NONNEG_INT, "batch_size": {"type": "integer", "minimum": 2}, "lr": _POS_NUM,
            "weight_decay": _NONNEG_NUM, "threshold": _FRAC, "threshold_sweep": _BOOL,
            "shuffle_labels": _BOOL,
        }),
        "static": _table({
            "checkpoint": _TASK_REF, "error_type": _STR, "frames_per_video": _POS_INT, "epochs": _NONNEG_INT,
            "batch_size": {"type": "integer", "minimum": 2}, "lr": _POS_NUM, "weight_decay": _NONNEG_NUM,
            "freeze_backbone": _BOOL, "threshold": _FRAC,
        }),
        "ensemble": _table({"a": _TASK_REF, "b": _TASK_REF, "method": {"enum": ["mean", "logit"]}}),
        "visualize": _table({"checkpoint": _TASK_REF, "video_id": _STR, "frame": _NONNEG_INT,
                             "alpha": _FRAC}),
    }),
}

# keys that change where or how fast a run happens but not what it computes
HASH_EXCLUDED = ("out", "jobs")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``"a.b=3"`` -> (["a", "b"], 3). Values are TOML literals; bare words become strings."""
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigInvalid(item, "override must look like key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(config: dict, overrides: Iterable[str]) -> dict:
    config = copy.deepcopy(config)
    for item in overrides:
        path, value = parse_override(item)
        node = config
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigInvalid(".".join(path), "unknown section")
            node = node[part]
        node[path[-1]] = value
    return config


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts.append(extra[0] if extra else "?")
        return ".".join(parts)
    return ".".join(parts) or "<root>"


def validate(config: dict) -> dict:
    """Raise :class:`ConfigInvalid` naming the dotted path of the first offending key."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        reason = "unknown key" if err.validator == "additionalProperties" else err.message
        raise ConfigInvalid(_error_path(err), reason)
    s = config["synth"]
    if s["period_min"] > s["period_max"]:
        raise ConfigInvalid("synth.period_min", "must not exceed synth.period_max")
    if s["magnitude_min"] > s["magnitude_max"]:
        raise ConfigInvalid("synth.magnitude_min", "must not exceed synth.magnitude_max")
    if abs(sum(config["splits"]["fractions"]) - 1.0) > 1e-9:
        raise ConfigInvalid("splits.fractions", "must sum to 1")
    if config["triplets"]["delta"] <= config["triplets"]["epsilon_pos"]:
        raise ConfigInvalid("triplets.delta", "must exceed triplets.epsilon_pos")
    if config["pad"]["appearance_dim"] <= config["pad"]["pose_dim"]:
        raise ConfigInvalid("pad.appearance_dim", "must exceed pad.pose_dim")
    return config


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the TOML file (if any), then overrides; validated."""
    config = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise MissingFile(str(p))
        try:
            with p.open("rb") as fh:
                config = _merge(config, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(str(p), str(exc)) from None
    return validate(apply_overrides(config, overrides))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON config, ignoring output location and worker count."""
    body = {k: v for k, v in config.items() if k not in HASH_EXCLUDED}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed: first 4 bytes of sha256("<seed>:<stage>"), masked to 31 bits."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF
