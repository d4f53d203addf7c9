"""On-disk formats shared across the pipeline.

Three artifact families live here:

* PAVF tensors -- a tiny binary container for rank-1/rank-2 float32 arrays.
  Layout, in order: 4 ASCII magic bytes ``PAVF``, uint32 version, uint32 rank
  (1 or 2), ``rank`` uint32 dims, then the payload as row-major little-endian
  IEEE-754 float32. Everything is little-endian. The format is deliberately
  small enough to re-implement from this docstring in any language.
* Dataset manifests -- a single JSON document listing feature tensors with
  video id, label, domain, scene and frame bookkeeping.
* Frame masks -- JSON half-open frame intervals compiled to boolean masks,
  used as evaluation ground truth.

Readers are safe to use concurrently on distinct files; writers assume
exclusive access to their target path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAVF_MAGIC = b"PAVF"
PAVF_VERSION = 1

LABELS = ("normal", "abnormal")
DOMAINS = ("real", "pseudo")


class PavfError(ValueError):
    """Malformed PAVF payload or header."""


class ManifestError(ValueError):
    """Manifest failed validation. ``errors`` holds (entry_index, message) pairs.

    ``entry_index`` is -1 for document-level problems.
    """

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        lines = "; ".join(f"entry {i}: {msg}" if i >= 0 else msg for i, msg in errors)
        super().__init__(f"invalid manifest: {lines}")


class MaskError(ValueError):
    """Malformed frame-mask document."""


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Write a rank-1 or rank-2 float array to ``path`` in PAVF layout.

    Values are stored as float32; the input is cast at this boundary.
    Non-finite entries (before or after the cast) are rejected.
    """
    arr = np.asarray(t)
    if arr.ndim not in (1, 2):
        raise PavfError(f"rank must be 1 or 2, got {arr.ndim}")
    if arr.size == 0:
        raise PavfError("tensor must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise PavfError("tensor contains non-finite entries")
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise PavfError("tensor overflows float32 at the file boundary")
    header = struct.pack("<4sII", PAVF_MAGIC, PAVF_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a PAVF file back as a float32 array (rank 1 or 2)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise PavfError(f"{path}: truncated header")
    magic, version, rank = struct.unpack_from("<4sII", raw, 0)
    if magic != PAVF_MAGIC:
        raise PavfError(f"{path}: bad magic {magic!r}")
    if version != PAVF_VERSION:
        raise PavfError(f"{path}: unsupported version {version}")
    if rank not in (1, 2):
        raise PavfError(f"{path}: rank must be 1 or 2, got {rank}")
    if len(raw) < 12 + 4 * rank:
        raise PavfError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    if any(d < 1 for d in dims):
        raise PavfError(f"{path}: dims must be >= 1, got {dims}")
    n = int(np.prod(dims))
    expected = 12 + 4 * rank + 4 * n
    if len(raw) != expected:
        raise PavfError(f"{path}: payload length {len(raw) - 12 - 4 * rank} != {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=12 + 4 * rank)
    return data.reshape(dims).copy()


def read_tensor_shape(path: str | Path) -> tuple[int, ...]:
    """Read only the dims from a PAVF header (cheap manifest validation)."""
    with open(path, "rb") as fh:
        head = fh.read(20)
    if len(head) < 12:
        raise PavfError(f"{path}: truncated header")
    magic, version, rank = struct.unpack_from("<4sII", head, 0)
    if magic != PAVF_MAGIC or version != PAVF_VERSION or rank not in (1, 2):
        raise PavfError(f"{path}: not a readable PAVF header")
    if len(head) < 12 + 4 * rank:
        raise PavfError(f"{path}: truncated dims")
    return struct.unpack_from(f"<{rank}I", head, 12)


@dataclass
class ManifestEntry:
    path: str
    video_id: str
    label: str
    domain: str
    scene_id: str
    frames_per_row: int
    total_frames: int

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "video_id": self.video_id,
            "label": self.label,
            "domain": self.domain,
            "scene_id": self.scene_id,
            "frames_per_row": self.frames_per_row,
            "total_frames": self.total_frames,
        }


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def tensor_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def by_id(self, video_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.video_id == video_id:
                return e
        raise KeyError(video_id)

    def stream(self, label: str, domain: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == label and e.domain == domain]


_ENTRY_FIELDS = {
    "path": str,
    "video_id": str,
    "label": str,
    "domain": str,
    "scene_id": str,
    "frames_per_row": int,
    "total_frames": int,
}


def read_manifest(path: str | Path, training: bool = False, check_tensors: bool = True) -> DatasetManifest:
    """Load and fully validate a manifest JSON document.

    Validation is total: any malformed input raises a ``ManifestError``
    collecting every violation with its entry index, and never returns a
    partial manifest. Tensor paths resolve relative to the manifest's
    directory. With ``training=True`` the no-real-abnormal rule is enforced
    (label=abnormal implies domain=pseudo). ``check_tensors=False`` skips
    the on-disk existence / row-count checks (metadata-only validation).
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError([(-1, f"unreadable manifest: {exc}")]) from exc

    errors: list[tuple[int, str]] = []
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ManifestError([(-1, 'manifest must be a JSON object with an "entries" array')])

    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for i, raw in enumerate(doc["entries"]):
        if not isinstance(raw, dict):
            errors.append((i, "entry must be a JSON object"))
            continue
        bad = False
        for name, typ in _ENTRY_FIELDS.items():
            if name not in raw:
                errors.append((i, f"missing field {name!r}"))
                bad = True
            elif not isinstance(raw[name], typ) or isinstance(raw[name], bool):
                errors.append((i, f"field {name!r} must be {typ.__name__}"))
                bad = True
        if bad:
            continue
        e = ManifestEntry(**{k: raw[k] for k in _ENTRY_FIELDS})
        if e.label not in LABELS:
            errors.append((i, f"label must be one of {LABELS}, got {e.label!r}"))
        if e.domain not in DOMAINS:
            errors.append((i, f"domain must be one of {DOMAINS}, got {e.domain!r}"))
        if e.frames_per_row < 1:
            errors.append((i, "frames_per_row must be positive"))
        if e.total_frames < 1:
            errors.append((i, "total_frames must be positive"))
        if e.video_id in seen:
            errors.append((i, f"duplicate video_id {e.video_id!r} (first at entry {seen[e.video_id]})"))
        else:
            seen[e.video_id] = i
        if training and e.label == "abnormal" and e.domain != "pseudo":
            errors.append((i, f"training manifests admit no real abnormal videos ({e.video_id!r})"))
        entries.append(e)

    manifest = DatasetManifest(entries=entries, root=path.parent)
    if check_tensors:
        for i, e in enumerate(entries):
            tp = manifest.tensor_path(e)
            if not tp.is_file():
                errors.append((i, f"missing tensor file {str(tp)!r}"))
                continue
            try:
                dims = read_tensor_shape(tp)
            except PavfError as exc:
                errors.append((i, str(exc)))
                continue
            rows = dims[0]
            if e.frames_per_row >= 1 and e.total_frames >= 1:
                if not (e.frames_per_row * rows >= e.total_frames > e.frames_per_row * (rows - 1)):
                    errors.append((i, (
                        f"frame-count inconsistency: rows={rows}, frames_per_row={e.frames_per_row}, "
                        f"total_frames={e.total_frames}"
                    )))

    if errors:
        raise ManifestError(sorted(errors))
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {"entries": [e.to_json() for e in manifest.entries]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def expand_to_frames(row_scores: np.ndarray, frames_per_row: int, total_frames: int) -> np.ndarray:
    """Repeat per-row scores so frame ``f`` gets ``row_scores[f // frames_per_row]``.

    The last row may cover fewer than ``frames_per_row`` frames.
    """
    scores = np.asarray(row_scores, dtype=np.float64).reshape(-1)
    if frames_per_row < 1:
        raise ValueError("frames_per_row must be positive")
    if total_frames < 0:
        raise ValueError("total_frames must be non-negative")
    if total_frames == 0:
        return np.zeros(0, dtype=np.float64)
    if len(scores) * frames_per_row < total_frames:
        raise ValueError(
            f"insufficient rows: {len(scores)} rows x {frames_per_row} frames/row < {total_frames} frames"
        )
    idx = np.arange(total_frames) // frames_per_row
    return scores[idx]


def compile_mask(video_id: str, intervals: list, total_frames: int) -> np.ndarray:
    """Compile half-open [start, end) frame intervals into a boolean mask."""
    mask = np.zeros(total_frames, dtype=bool)
    for iv in intervals:
        if not (isinstance(iv, (list, tuple)) and len(iv) == 2):
            raise MaskError(f"{video_id}: interval must be [start, end), got {iv!r}")
        s, e = iv
        if not (isinstance(s, int) and isinstance(e, int)) or isinstance(s, bool) or isinstance(e, bool):
            raise MaskError(f"{video_id}: interval bounds must be integers, got {iv!r}")
        if not (0 <= s < e <= total_frames):
            raise MaskError(f"{video_id}: interval {iv!r} out of bounds for {total_frames} frames")
        mask[s:e] = True
    return mask


@dataclass
class GenerationJob:
    """One image-to-video synthesis job: init image + refined prompt + sampler settings."""

    class_name: str
    init_image_path: str
    prompt: str
    resolution: tuple[int, int] = (832, 480)
    frame_count: int = 81
    fps: int = 16
    sampling_steps: int = 25
    guidance: tuple[float, float] = (3.5, 3.5)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")

    def to_json(self) -> dict:
        return {
            "class_name": self.class_name,
            "init_image_path": self.init_image_path,
            "prompt": self.prompt,
            "resolution": list(self.resolution),
            "frame_count": self.frame_count,
            "fps": self.fps,
            "sampling_steps": self.sampling_steps,
            "guidance": list(self.guidance),
        }


def write_generation_manifest(jobs: list[GenerationJob], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([j.to_json() for j in jobs], fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_generation_manifest(path: str | Path) -> list[GenerationJob]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    jobs = []
    for item in doc:
        jobs.append(GenerationJob(
            class_name=item["class_name"],
            init_image_path=item["init_image_path"],
            prompt=item["prompt"],
            resolution=tuple(item["resolution"]),
            frame_count=item["frame_count"],
            fps=item["fps"],
            sampling_steps=item["sampling_steps"],
            guidance=tuple(item["guidance"]),
        ))
    return jobs


def read_masks(path: str | Path, manifest: DatasetManifest) -> dict[str, np.ndarray]:
    """Read a JSON array of {video_id, intervals} into per-video boolean masks.

    Mask lengths come from the manifest's total_frames; every mask document
    entry must reference a manifest video.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise MaskError("mask document must be a JSON array")
    masks: dict[str, np.ndarray] = {}
    for item in doc:
        if not isinstance(item, dict) or "video_id" not in item or "intervals" not in item:
            raise MaskError(f"mask entries need video_id and intervals, got {item!r}")
        vid = item["video_id"]
        if vid in masks:
            raise MaskError(f"duplicate mask for video {vid!r}")
        try:
            entry = manifest.by_id(vid)
        except KeyError:
            raise MaskError(f"mask references unknown video {vid!r}") from None
        masks[vid] = compile_mask(vid, item["intervals"], entry.total_frames)
    return masks


def write_masks(masks: list[dict], path: str | Path) -> None:
    """Write mask documents ({video_id, intervals}) as a JSON array."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(masks, fh, indent=2, sort_keys=True)
        fh.write("\n")
