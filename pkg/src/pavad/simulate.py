"""Synthetic feature streams reproducing the real-vs-pseudo magnitude gap.

Rows are unit directions drawn around cluster centers (normalized Gaussian
perturbations, a cheap von-Mises stand-in) times a norm with the configured
mean. Training pseudo streams carry inflated norms (mean ratio defaults to
23.03/20.52); test anomalies reuse the training abnormal directions but at
real-scale norms, which is exactly the covariate shift a magnitude-reliant
detector fails on. Everything is written in the standard tensor + manifest +
mask layout, so a generated directory is a drop-in dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import formats
from .model import DetectorParams, ModelConfig, assignments_and_usage, usage_entropy
from .training import TrainConfig, evaluate, load_features, train

REAL_MEAN_NORM = 20.52
PSEUDO_MEAN_NORM = 23.03


@dataclass
class SimConfig:
    dim: int = 32
    videos_per_stream: int = 12
    test_videos_per_class: int = 8
    rows_per_video: int = 20
    frames_per_row: int = 16
    normal_mean_norm: float = REAL_MEAN_NORM
    pseudo_norm_scale: float = PSEUDO_MEAN_NORM / REAL_MEAN_NORM
    anomaly_fraction: float = 0.25
    n_abnormal_modes: int = 6
    mode_skew: float = 1.0  # training mode frequency ~ (m+1)^-skew; test modes are uniform
    direction_spread: float = 0.5
    mode_offset: float = 0.6
    norm_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.pseudo_norm_scale <= 0:
            raise ValueError("pseudo_norm_scale must be > 0")
        if not (0.0 < self.anomaly_fraction < 1.0):
            raise ValueError("anomaly_fraction must be in (0, 1)")
        if self.rows_per_video < 2:
            raise ValueError("rows_per_video must be >= 2")
        if self.n_abnormal_modes < 1:
            raise ValueError("need at least one abnormal mode")
        burst = self.burst_rows()
        if burst >= self.rows_per_video:
            raise ValueError("anomaly burst covers the whole video; lower anomaly_fraction")

    def burst_rows(self) -> int:
        return max(1, round(self.anomaly_fraction * self.rows_per_video))


@dataclass
class SimOutput:
    out_dir: Path
    train_manifest: Path
    test_manifest: Path
    masks_path: Path
    mean_norms: dict[str, float]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _directions(rng: np.random.Generator, center: np.ndarray, n: int, spread: float) -> np.ndarray:
    d = center.shape[0]
    pert = rng.standard_normal((n, d)) * (spread / np.sqrt(d))
    rows = center[None, :] + pert
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _norms(rng: np.random.Generator, n: int, mean: float, jitter: float) -> np.ndarray:
    # uniform multiplicative jitter: exact target mean in expectation
    return mean * (1.0 + jitter * (2.0 * rng.random(n) - 1.0))


class _World:
    """Direction geometry shared by the train and test splits of one run."""

    def __init__(self, cfg: SimConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.normal_center = _unit(rng.standard_normal(cfg.dim))
        self.mode_centers = []
        for _ in range(cfg.n_abnormal_modes):
            v = _unit(rng.standard_normal(cfg.dim))
            self.mode_centers.append(_unit(self.normal_center + cfg.mode_offset * v))

    def normal_rows(self, rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
        dirs = _directions(rng, self.normal_center, n, self.cfg.direction_spread)
        return dirs * _norms(rng, n, self.cfg.normal_mean_norm * scale, self.cfg.norm_jitter)[:, None]

    def burst_rows(self, rng: np.random.Generator, mode: int, n: int, scale: float) -> np.ndarray:
        dirs = _directions(rng, self.mode_centers[mode % len(self.mode_centers)], n,
                           self.cfg.direction_spread)
        return dirs * _norms(rng, n, self.cfg.normal_mean_norm * scale, self.cfg.norm_jitter)[:, None]


def training_mode_assignment(n_videos: int, n_modes: int, skew: float) -> list[int]:
    """Per-video burst modes with frequency ~ (m+1)^-skew (largest-remainder rounding).

    Every mode appears at least once when there are enough videos, but the
    head modes dominate; the test split draws modes uniformly instead, so
    rare-mode coverage is exactly what a detector gets graded on.
    """
    weights = np.array([(m + 1.0) ** (-skew) for m in range(n_modes)])
    quota = weights / weights.sum() * n_videos
    counts = np.floor(quota).astype(int)
    if n_videos >= n_modes:
        counts = np.maximum(counts, 1)
    while counts.sum() > n_videos:
        counts[int(np.argmax(counts))] -= 1
    remainder = quota - np.floor(quota)
    while counts.sum() < n_videos:
        order = np.argsort(-remainder, kind="stable")
        done = False
        for m in order:
            if counts.sum() < n_videos:
                counts[m] += 1
                remainder[m] = -1
                done = True
                break
        if not done:  # pragma: no cover - defensive
            counts[0] += 1
    modes: list[int] = []
    for m, c in enumerate(counts):
        modes.extend([m] * int(c))
    return modes[:n_videos]


def _abnormal_video(world: _World, rng: np.random.Generator, mode: int, scale: float) -> tuple[np.ndarray, int, int]:
    cfg = world.cfg
    burst = cfg.burst_rows()
    start = int(rng.integers(0, cfg.rows_per_video - burst + 1))
    rows = world.normal_rows(rng, cfg.rows_per_video, scale)
    rows[start:start + burst] = world.burst_rows(rng, mode, burst, scale)
    return rows, start, burst


def generate(cfg: SimConfig, out_dir: str | Path) -> SimOutput:
    """Write train/ and test/ datasets plus test masks under ``out_dir``."""
    out = Path(out_dir)
    train_dir = out / "train"
    test_dir = out / "test"
    train_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(cfg.seed)
    world_rng, data_rng = (np.random.Generator(np.random.PCG64(s)) for s in root.spawn(2))
    world = _World(cfg, world_rng)

    norms_seen: dict[str, list[float]] = {"real": [], "pseudo": []}
    train_entries: list[formats.ManifestEntry] = []
    test_entries: list[formats.ManifestEntry] = []
    mask_docs: list[dict] = []

    def emit(directory: Path, entries: list, vid: str, rows: np.ndarray, label: str,
             domain: str, scene: str, total_frames: int) -> None:
        formats.write_tensor(rows, directory / f"{vid}.pavf")
        entries.append(formats.ManifestEntry(
            path=f"{vid}.pavf", video_id=vid, label=label, domain=domain, scene_id=scene,
            frames_per_row=cfg.frames_per_row, total_frames=total_frames,
        ))
        norms_seen["pseudo" if domain == "pseudo" else "real"].extend(
            np.linalg.norm(rows, axis=1).tolist())

    full = cfg.rows_per_video * cfg.frames_per_row
    for i in range(cfg.videos_per_stream):
        rows = world.normal_rows(data_rng, cfg.rows_per_video, 1.0)
        emit(train_dir, train_entries, f"train_real_normal_{i:03d}", rows, "normal", "real",
             f"scene{i % 3}", full)
    for i in range(cfg.videos_per_stream):
        rows = world.normal_rows(data_rng, cfg.rows_per_video, cfg.pseudo_norm_scale)
        emit(train_dir, train_entries, f"train_pseudo_normal_{i:03d}", rows, "normal", "pseudo",
             f"scene{i % 3}", full)
    train_modes = training_mode_assignment(cfg.videos_per_stream, cfg.n_abnormal_modes, cfg.mode_skew)
    for i in range(cfg.videos_per_stream):
        rows, _, _ = _abnormal_video(world, data_rng, train_modes[i], cfg.pseudo_norm_scale)
        emit(train_dir, train_entries, f"train_pseudo_abnormal_{i:03d}", rows, "abnormal", "pseudo",
             f"scene{i % 3}", full)

    # test split: real statistics on both classes; last row covers fewer frames
    test_frames = full - cfg.frames_per_row // 2
    for i in range(cfg.test_videos_per_class):
        rows = world.normal_rows(data_rng, cfg.rows_per_video, 1.0)
        vid = f"test_normal_{i:03d}"
        emit(test_dir, test_entries, vid, rows, "normal", "real", f"scene{i % 3}", test_frames)
        mask_docs.append({"video_id": vid, "intervals": []})
    for i in range(cfg.test_videos_per_class):
        rows, start, burst = _abnormal_video(world, data_rng, i, 1.0)
        vid = f"test_abnormal_{i:03d}"
        emit(test_dir, test_entries, vid, rows, "abnormal", "real", f"scene{i % 3}", test_frames)
        lo = start * cfg.frames_per_row
        hi = min((start + burst) * cfg.frames_per_row, test_frames)
        mask_docs.append({"video_id": vid, "intervals": [[lo, hi]]})

    train_manifest = train_dir / "manifest.json"
    test_manifest = test_dir / "manifest.json"
    masks_path = test_dir / "masks.json"
    formats.write_manifest(formats.DatasetManifest(train_entries, train_dir), train_manifest)
    formats.write_manifest(formats.DatasetManifest(test_entries, test_dir), test_manifest)
    formats.write_masks(mask_docs, masks_path)

    mean_norms = {k: float(np.mean(v)) for k, v in norms_seen.items()}
    return SimOutput(out_dir=out, train_manifest=train_manifest, test_manifest=test_manifest,
                     masks_path=masks_path, mean_norms=mean_norms)


@dataclass
class AblationRow:
    variant: str
    seed: int
    auc_micro: float
    usage_entropy: float

    def to_json(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "auc_micro": self.auc_micro,
                "usage_entropy": self.usage_entropy}


@dataclass
class Variant:
    name: str
    lambda1: float
    lambda2: float


DEFAULT_VARIANTS = (Variant("baseline", 0.0, 0.0), Variant("full", 1.0, 0.1))


def final_usage_entropy(params: DetectorParams, manifest: formats.DatasetManifest) -> float:
    """Entropy of abnormal-bank usage over the training abnormal stream (full rows)."""
    from . import autodiff as ad
    from .model import BoundModel

    features = load_features(manifest)
    embs = []
    for e in manifest.stream("abnormal", "pseudo"):
        bound = BoundModel(params, ad.Graph())
        f_tilde = bound.encode(features[e.video_id])
        embs.append(f_tilde.data)
    z = np.concatenate(embs, axis=0)
    _, u = assignments_and_usage(z, params.arrays["memory.abnormal"], params.config.tau)
    return usage_entropy(u)


def run_ablation(
    sim_cfg: SimConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    seeds: list[int],
    variants: list[Variant] | None = None,
) -> list[AblationRow]:
    """Full train+evaluate cycles on fresh simulated data per (variant, seed)."""
    variants = list(variants) if variants is not None else list(DEFAULT_VARIANTS)
    if not variants:
        raise ValueError("need at least one variant")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows: list[AblationRow] = []
    for seed in seeds:
        data = generate(replace(sim_cfg, seed=seed), out / f"data_seed{seed}")
        train_manifest = formats.read_manifest(data.train_manifest, training=True)
        test_manifest = formats.read_manifest(data.test_manifest)
        masks = formats.read_masks(data.masks_path, test_manifest)
        for variant in variants:
            lw = replace(train_cfg.loss_weights, lambda1=variant.lambda1, lambda2=variant.lambda2)
            cfg = replace(train_cfg, loss_weights=lw, seed=seed)
            run_dir = out / f"{variant.name}_seed{seed}"
            result = train(train_manifest, model_cfg, cfg, run_dir)
            ev = evaluate(result.params, test_manifest, masks, run_dir)
            rows.append(AblationRow(
                variant=variant.name,
                seed=seed,
                auc_micro=ev.auc_micro,
                usage_entropy=final_usage_entropy(result.params, train_manifest),
            ))
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in rows], fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows
