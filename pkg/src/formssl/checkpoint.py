"""Checkpoint archive format.

A checkpoint is a zip archive (stored, fixed timestamps, so identical content
gives identical bytes) with two members:

``manifest.json``
    ``{"format": 1, "task", "seed", "code_version", "config", "log"}``.
``tensors.bin``
    magic ``b"FSSLTEN1"``, then ``uint32`` tensor count, then per tensor in
    state-dict order: ``uint16`` name length, UTF-8 name, ``uint8`` dtype
    length, numpy dtype string (e.g. ``"<f4"``), ``uint8`` ndim, ``ndim`` x
    ``uint64`` dims, ``uint64`` byte count, raw little-endian data. All
    integers are little-endian.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import MissingFile, SchemaViolation

TASKS = ("cvcspc", "vanilla_pc", "md", "pad", "detector")
MAGIC = b"FSSLTEN1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    task: str
    config: dict
    state: "OrderedDict[str, torch.Tensor]"
    log: list = field(default_factory=list)  # dicts with epoch, split, loss
    seed: int = 0
    code_version: str = __version__

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown checkpoint task {self.task!r}")


def _encode_tensors(state) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dtype = arr.dtype.str.encode()
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", len(dtype)) + dtype)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes(order="C")
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def _decode_tensors(blob: bytes):
    if blob[:8] != MAGIC:
        raise SchemaViolation(0, "tensors.bin", "bad magic")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (n,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dtype = np.dtype(blob[pos:pos + n].decode())
        pos += n
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        state[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    return state


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": 1,
        "task": ckpt.task,
        "seed": ckpt.seed,
        "code_version": ckpt.code_version,
        "config": ckpt.config,
        "log": ckpt.log,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in (("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode()),
                           ("tensors.bin", _encode_tensors(ckpt.state))):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        state = _decode_tensors(zf.read("tensors.bin"))
    return Checkpoint(manifest["task"], manifest["config"], state, manifest.get("log", []),
                      manifest.get("seed", 0), manifest.get("code_version", ""))


def write_log_csv(path, log) -> None:
    """Training log as CSV ``epoch,split,loss``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss"])
        for row in log:
            w.writerow([row["epoch"], row["split"], repr(float(row["loss"]))])
