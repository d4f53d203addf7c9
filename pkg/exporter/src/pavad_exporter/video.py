"""Video segment features: snippets, ten-crop augmentation, statistics backbone.

A video (file or frames directory) becomes a TxD matrix: non-overlapping
fixed-length snippets, each summarized by appearance and motion statistics
(channel means/deviations, frame-difference energy, gradient energy,
luminance histogram, temporal drift) and projected through a fixed
orthonormal matrix. Crops are averaged into one row at export time so the
engine stays crop-agnostic. A video shorter than one snippet yields a single
row padded by repeating its last frame, flagged in the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SNIPPET_LEN = 16
FRAME_SIZE = 112
CROP_RATIO = 0.875
FEATURE_DIM = 64
_N_STATS = 14
_SEED = 2401

_FRAME_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _projection() -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(_SEED))
    q, _ = np.linalg.qr(rng.standard_normal((FEATURE_DIM, FEATURE_DIM)))
    return q[:, :_N_STATS]


_P = _projection()


def load_frames(source: str | Path) -> list[np.ndarray]:
    """Frames as RGB float arrays in [0, 1] from a directory or a video file."""
    source = Path(source)
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() in _FRAME_SUFFIXES)
        if not files:
            raise ValueError(f"no frames found under {source}")
        frames = []
        for f in files:
            with Image.open(f) as im:
                rgb = im.convert("RGB").resize((FRAME_SIZE, FRAME_SIZE), Image.BILINEAR)
            frames.append(np.asarray(rgb, dtype=np.float64) / 255.0)
        return frames
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise ValueError(f"decoding {source} needs opencv; export frames to a directory instead") from exc
    cap = cv2.VideoCapture(str(source))
    frames = []
    while True:
        ok, bgr = cap.read()
        if not ok:
            break
        resized = cv2.resize(bgr, (FRAME_SIZE, FRAME_SIZE), interpolation=cv2.INTER_LINEAR)
        frames.append(resized[:, :, ::-1].astype(np.float64) / 255.0)
    cap.release()
    if not frames:
        raise ValueError(f"could not decode any frames from {source}")
    return frames


def crop_views(frame: np.ndarray, crops: int) -> list[np.ndarray]:
    """1 crop = center; 10 crops = four corners + center, each plus its mirror."""
    if crops not in (1, 10):
        raise ValueError("crops must be 1 or 10")
    h, w = frame.shape[:2]
    ch, cw = int(h * CROP_RATIO), int(w * CROP_RATIO)
    center = ((h - ch) // 2, (w - cw) // 2)
    if crops == 1:
        origins = [center]
    else:
        origins = [(0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw), center]
    views = [frame[y:y + ch, x:x + cw] for y, x in origins]
    if crops == 10:
        views += [v[:, ::-1] for v in views]
    return views


def snippet_stats(snippet: list[np.ndarray]) -> np.ndarray:
    stack = np.stack(snippet)  # L x H x W x 3
    lum = stack.mean(axis=3)
    stats = np.empty(_N_STATS)
    stats[0:3] = stack.mean(axis=(0, 1, 2))
    stats[3:6] = stack.std(axis=(0, 1, 2))
    diffs = np.abs(np.diff(lum, axis=0))
    stats[6] = diffs.mean() if len(snippet) > 1 else 0.0
    stats[7] = diffs.std() if len(snippet) > 1 else 0.0
    stats[8] = np.abs(np.diff(lum, axis=1)).mean() + np.abs(np.diff(lum, axis=2)).mean()
    hist, _ = np.histogram(lum, bins=4, range=(0.0, 1.0))
    stats[9:13] = hist / lum.size
    stats[13] = lum[-1].mean() - lum[0].mean()
    return stats


@dataclass
class VideoFeatures:
    rows: np.ndarray  # T x FEATURE_DIM
    frames_per_row: int
    total_frames: int
    padded: bool


def extract_video_features(source: str | Path, crops: int = 1,
                           snippet_len: int = SNIPPET_LEN) -> VideoFeatures:
    frames = load_frames(source)
    total = len(frames)
    padded = total < snippet_len
    if padded:
        frames = frames + [frames[-1]] * (snippet_len - total)
    n_rows = int(np.ceil(len(frames) / snippet_len))
    if len(frames) < n_rows * snippet_len:  # pad the trailing partial snippet
        padded = padded or (total % snippet_len != 0)
        frames = frames + [frames[-1]] * (n_rows * snippet_len - len(frames))
    rows = np.empty((n_rows, FEATURE_DIM))
    for r in range(n_rows):
        snippet = frames[r * snippet_len:(r + 1) * snippet_len]
        views_per_frame = [crop_views(f, crops) for f in snippet]
        per_crop = [snippet_stats([vf[i] for vf in views_per_frame]) for i in range(crops)]
        rows[r] = _P @ np.mean(per_crop, axis=0)
    return VideoFeatures(rows=rows, frames_per_row=snippet_len, total_frames=total,
                         padded=padded)


def lockfile_payload() -> dict:
    return {
        "extractor": "stats-video-v1",
        "feature_dim": FEATURE_DIM,
        "frame_size": FRAME_SIZE,
        "snippet_len": SNIPPET_LEN,
        "crop_ratio": CROP_RATIO,
        "projection_seed": _SEED,
    }
