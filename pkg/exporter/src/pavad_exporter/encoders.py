"""Deterministic vision-text encoder over a shared concept space.

Pretrained checkpoints are not bundled (and often not downloadable in
air-gapped deployments), so the default extractor maps images and text into
the same small space of interpretable scene concepts: images through pixel
statistics (asphalt mass, lane markings, warm indoor palettes, greenery,
sky, skin tones, clutter), text through a keyword lexicon. Both sides are
projected through one fixed orthonormal matrix and unit-normalized, so
cosine similarity in the output space equals cosine similarity of concept
activations. That preserves the semantics retrieval needs: a street scene
really does score higher against a road-accident query than a living room
does.

Real encoders can be registered under a new extractor id; the lockfile pins
whichever one produced an export.

Both encoders are pure functions of their inputs plus the fixed seed; the
same image or phrase always produces bit-identical embeddings.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

EXTRACTOR_ID = "concept-vt-v1"
RESIZE = 128
EMBED_DIM = 64
_PRE_DIM = 32
_N_CONCEPTS = 12
_SEED = 1729

(ASPHALT, LANES, VEHICLE, WARM_INDOOR, FURNITURE, GREENERY, SKY, PEOPLE,
 BRIGHTNESS, CONTRAST, CLUTTER, FLATNESS) = range(_N_CONCEPTS)

_LEXICON = {
    ASPHALT: {"road": 1.0, "roads": 1.0, "roadway": 1.0, "street": 1.0, "streets": 1.0,
              "lane": 0.6, "lanes": 0.6, "highway": 1.0, "intersection": 0.9,
              "traffic": 0.8, "crosswalk": 0.8, "pavement": 0.9, "shoulder": 0.5,
              "median": 0.4, "asphalt": 1.0},
    LANES: {"lane": 0.8, "lanes": 0.8, "marking": 0.8, "markings": 0.8, "crosswalk": 0.6,
            "stripe": 0.8, "stripes": 0.8},
    VEHICLE: {"vehicle": 1.0, "vehicles": 1.0, "car": 1.0, "cars": 1.0, "truck": 0.9,
              "bus": 0.8, "motorcycle": 0.8, "accident": 0.7, "accidents": 0.7,
              "collision": 0.7, "crash": 0.7},
    WARM_INDOOR: {"indoor": 1.0, "indoors": 1.0, "room": 0.9, "office": 0.9, "store": 0.8,
                  "shop": 0.8, "home": 0.9, "kitchen": 0.9, "hallway": 0.7, "interior": 1.0},
    FURNITURE: {"furniture": 1.0, "shelf": 0.9, "shelves": 0.9, "counter": 0.8, "desk": 0.9,
                "table": 0.8, "chair": 0.8, "sofa": 0.9, "merchandise": 0.6},
    GREENERY: {"grass": 1.0, "tree": 0.9, "trees": 0.9, "park": 0.8, "garden": 0.9,
               "vegetation": 1.0},
    SKY: {"sky": 1.0, "outdoor": 0.6, "outdoors": 0.6, "daytime": 0.5, "dusk": 0.4},
    PEOPLE: {"person": 1.0, "people": 1.0, "pedestrian": 0.9, "pedestrians": 0.9,
             "crowd": 0.9, "individual": 0.7, "man": 0.6, "woman": 0.6},
    BRIGHTNESS: {"bright": 0.8, "daylight": 0.6, "daytime": 0.4, "illuminated": 0.6},
    CONTRAST: {"camera": 0.3, "cctv": 0.3, "surveillance": 0.3, "footage": 0.3},
    CLUTTER: {"cluttered": 0.8, "busy": 0.5, "multiple": 0.3},
    FLATNESS: {"logo": 1.0, "overlay": 1.0, "ui": 1.0, "screen": 0.8, "dashboard": 0.9,
               "speedometer": 0.9, "blank": 0.8, "black": 0.6},
}


def _projection() -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(_SEED))
    square = rng.standard_normal((EMBED_DIM, EMBED_DIM))
    q, _ = np.linalg.qr(square)
    return q[:, :_PRE_DIM]  # columns orthonormal: dot products are preserved


_P = _projection()


def _embed(pre: np.ndarray) -> np.ndarray:
    out = _P @ pre
    norm = np.linalg.norm(out)
    if norm == 0:
        raise ValueError("degenerate all-zero activation")
    return out / norm


def _hash_bucket(word: str) -> int:
    h = 2166136261
    for ch in word.encode("utf-8"):  # FNV-1a: stable across runs and platforms
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return _N_CONCEPTS + h % (_PRE_DIM - _N_CONCEPTS - 1)


def encode_text(phrase: str) -> np.ndarray:
    """Unit-norm embedding of a phrase via lexicon hits plus hashed residuals."""
    pre = np.zeros(_PRE_DIM)
    words = [w for w in "".join(c if c.isalnum() else " " for c in phrase.lower()).split() if w]
    for word in words:
        for concept, table in _LEXICON.items():
            if word in table:
                pre[concept] += table[word]
        pre[_hash_bucket(word)] += 0.05
    pre[_PRE_DIM - 1] = 0.01  # bias channel keeps empty phrases non-degenerate
    return _embed(pre)


def _rgb_to_hsv(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mx = img.max(axis=2)
    mn = img.min(axis=2)
    delta = mx - mn
    val = mx
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.zeros_like(mx)
    is_r = (mx == r) & (delta > 0)
    is_g = (mx == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    hue[is_r] = (60 * ((g - b) / safe))[is_r] % 360
    hue[is_g] = (60 * ((b - r) / safe) + 120)[is_g]
    hue[is_b] = (60 * ((r - g) / safe) + 240)[is_b]
    return hue, sat, val


def image_concepts(img: np.ndarray) -> np.ndarray:
    """Concept activations from an RGB float image in [0, 1]."""
    hue, sat, val = _rgb_to_hsv(img)
    h = img.shape[0]
    bottom = slice(h // 2, h)
    top = slice(0, h // 4)

    gray = (sat < 0.18)
    pre = np.zeros(_PRE_DIM)
    pre[ASPHALT] = float((gray & (val > 0.2) & (val < 0.75))[bottom].mean())
    pre[LANES] = float((gray & (val > 0.8))[bottom].mean()) * 4.0
    pre[VEHICLE] = float(((sat > 0.45) & (val > 0.25))[bottom].mean()) * 2.0
    warm = (hue > 15) & (hue < 55) & (sat > 0.15) & (sat < 0.75)
    pre[WARM_INDOOR] = float(warm.mean()) * 1.5
    gy = np.abs(np.diff(val, axis=0)).mean()
    gx = np.abs(np.diff(val, axis=1)).mean()
    pre[FURNITURE] = float(gx) * 4.0 * float(warm.mean() > 0.15)
    green = (hue > 70) & (hue < 170) & (sat > 0.25)
    pre[GREENERY] = float(green.mean()) * 1.5
    blueish_bright = ((hue > 180) & (hue < 260) & (val > 0.55)) | (gray & (val > 0.85))
    pre[SKY] = float(blueish_bright[top].mean())
    skin = (hue < 40) & (sat > 0.2) & (sat < 0.6) & (val > 0.35) & (val < 0.95)
    pre[PEOPLE] = float(skin.mean())
    pre[BRIGHTNESS] = float(val.mean()) * 0.5
    pre[CONTRAST] = float(val.std())
    pre[CLUTTER] = float(gx + gy) * 2.0
    pre[FLATNESS] = float(max(0.0, 0.1 - (gx + gy)) * 10.0)
    pre[_PRE_DIM - 1] = 0.01
    return pre


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB").resize((RESIZE, RESIZE), Image.BILINEAR)
    return np.asarray(rgb, dtype=np.float64) / 255.0


def encode_image(path: str | Path) -> np.ndarray:
    """Unit-norm embedding of an image file."""
    return _embed(image_concepts(load_image(path)))


def lockfile_payload() -> dict:
    return {
        "extractor": EXTRACTOR_ID,
        "embed_dim": EMBED_DIM,
        "resize": RESIZE,
        "projection_seed": _SEED,
        "concepts": _N_CONCEPTS,
    }
