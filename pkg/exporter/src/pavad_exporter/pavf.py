"""Writers for the engine's on-disk interchange formats.

Implemented from the published byte layout rather than imported from the
engine package: the formats are the contract between the two components, and
an independent implementation keeps it honest. Layout: 4 ASCII magic bytes
``PAVF``, uint32 version (1), uint32 rank (1 or 2), rank uint32 dims, then a
row-major little-endian float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PAVF"
VERSION = 1


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(arr)
    if arr.ndim not in (1, 2):
        raise ValueError(f"rank must be 1 or 2, got {arr.ndim}")
    if arr.size == 0:
        raise ValueError("tensor must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack("<4sII", MAGIC, VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))


def write_embedding_index(records: list[dict], path: str | Path) -> None:
    """records: [{id, kind, file, row?, scene_id?, source_path?}]"""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"records": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(entries: list[dict], path: str | Path) -> None:
    """entries: [{path, video_id, label, domain, scene_id, frames_per_row, total_frames}]"""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"entries": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
