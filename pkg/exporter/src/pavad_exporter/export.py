"""Export jobs: embeddings for curation, segment features for training/eval.

Outputs land in the engine's formats exactly (binary tensors, embedding
index JSON, dataset manifest JSON) plus a lockfile pinning the extractor
identifier and preprocessing constants, so an export is reproducible and
auditable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoders, pavf, video

UNIT_NORM_TOL = 1e-5

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ExportJob:
    input: str
    extractor: str  # "vision-text-encoder" | "video-backbone"
    output_dir: str
    crops: int = 1
    texts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.extractor not in ("vision-text-encoder", "video-backbone"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.crops not in (1, 10):
            raise ValueError("crops must be 1 or 10")


def _write_lockfile(out: Path, payload: dict) -> None:
    with open(out / "extractor.lock.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def discover_images(root: str | Path) -> list[tuple[str, Path, str]]:
    """(id, path, scene_id) for every image under root; scene = subdirectory name."""
    root = Path(root)
    found = []
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() in _IMAGE_SUFFIXES and p.is_file():
            rel = p.relative_to(root)
            scene = rel.parts[0] if len(rel.parts) > 1 else ""
            found.append((str(rel.with_suffix("")).replace("/", "__"), p, scene))
    if not found:
        raise ValueError(f"no images found under {root}")
    return found


def export_embeddings(images: list[tuple[str, Path, str]], texts: list[str],
                      out_dir: str | Path) -> dict:
    """One unit-norm vector file per image/phrase plus the index sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for image_id, path, scene in images:
        vec = encoders.encode_image(path)
        _assert_unit(vec, image_id)
        fname = f"img_{image_id}.pavf"
        pavf.write_tensor(vec, out / fname)
        records.append({"id": image_id, "kind": "image", "file": fname,
                        "scene_id": scene, "source_path": str(path)})
    for k, phrase in enumerate(texts):
        vec = encoders.encode_text(phrase)
        _assert_unit(vec, phrase)
        fname = f"text_{k:04d}.pavf"
        pavf.write_tensor(vec, out / fname)
        records.append({"id": phrase, "kind": "text", "file": fname})
    pavf.write_embedding_index(records, out / "index.json")
    _write_lockfile(out, encoders.lockfile_payload())
    return {"out_dir": str(out), "n_images": len(images), "n_texts": len(texts),
            "index": str(out / "index.json")}


def _assert_unit(vec: np.ndarray, name: str) -> None:
    norm = float(np.linalg.norm(vec.astype(np.float32)))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise AssertionError(f"embedding for {name!r} has norm {norm}")


def export_video_features(sources: list[tuple[str, Path]], out_dir: str | Path,
                          crops: int = 1, label: str = "normal", domain: str = "real",
                          scene_id: str = "") -> dict:
    """One TxD tensor + manifest entry per video; crops averaged into each row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    flagged = []
    for video_id, source in sources:
        feats = video.extract_video_features(source, crops=crops)
        fname = f"{video_id}.pavf"
        pavf.write_tensor(feats.rows, out / fname)
        entries.append({
            "path": fname, "video_id": video_id, "label": label, "domain": domain,
            "scene_id": scene_id or video_id, "frames_per_row": feats.frames_per_row,
            "total_frames": feats.total_frames,
        })
        if feats.padded:
            flagged.append(video_id)
    pavf.write_manifest(entries, out / "manifest.json")
    _write_lockfile(out, video.lockfile_payload())
    return {"out_dir": str(out), "n_videos": len(sources), "padded": flagged,
            "manifest": str(out / "manifest.json")}
