"""Training loop over the three video streams, Adam updates, and frame-level AUC.

One optimization step builds a fresh autodiff graph: every sampled video is
encoded, read against both banks and scored; pooled stream means feed the
alignment term and stacked abnormal embeddings feed the usage term. Batches
and parameter updates are bit-deterministic for a fixed (seed, config,
manifest) on one platform. Evaluation runs each video at full length (no
row subsampling), expands row scores to frames, and reports micro/macro
frame-level AUC by the midrank statistic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import formats
from .losses import BatchForward, LossBreakdown, LossWeights, total_loss
from .model import BoundModel, DetectorParams, ModelConfig, assignments_and_usage


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


@dataclass
class TrainConfig:
    steps: int
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_videos_per_stream: int = 4
    segment_number: int = 5
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "adam"
    random_crop: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.segment_number < 1 or self.batch_videos_per_stream < 1:
            raise ValueError("segment_number and batch_videos_per_stream must be >= 1")


@dataclass
class ScoreTrace:
    video_id: str
    frame_scores: np.ndarray


def sample_rows(n_rows: int, segment_number: int) -> np.ndarray:
    """Row indices for one video: uniform spacing when enough rows, else cyclic."""
    if n_rows >= segment_number:
        return (np.arange(segment_number) * n_rows) // segment_number
    return np.arange(segment_number) % n_rows


def load_features(manifest: formats.DatasetManifest) -> dict[str, np.ndarray]:
    """Read every referenced tensor into memory as float64 TxD arrays."""
    out = {}
    for e in manifest.entries:
        arr = formats.read_tensor(manifest.tensor_path(e)).astype(np.float64)
        if arr.ndim != 2:
            raise ValueError(f"{e.video_id}: expected a rank-2 feature tensor, got rank {arr.ndim}")
        out[e.video_id] = arr
    return out


def sample_batch(
    manifest: formats.DatasetManifest,
    features: dict[str, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Draw one batch per stream; every video contributes exactly segment_number rows.

    The pseudo-normal stream may be empty (alignment term is then skipped);
    the real-normal and pseudo-abnormal streams are required.
    """
    streams = []
    for label, domain, required in (
        ("normal", "real", True),
        ("normal", "pseudo", False),
        ("abnormal", "pseudo", True),
    ):
        entries = manifest.stream(label, domain)
        if not entries and required:
            raise ValueError(f"manifest has no {domain} {label} videos")
        batch = []
        if entries:
            n = min(cfg.batch_videos_per_stream, len(entries))
            picks = rng.choice(len(entries), size=n, replace=False)
            for i in sorted(picks):
                rows = features[entries[i].video_id]
                if cfg.random_crop and rows.shape[0] > cfg.segment_number:
                    idx = np.sort(rng.choice(rows.shape[0], size=cfg.segment_number, replace=False))
                else:
                    idx = sample_rows(rows.shape[0], cfg.segment_number)
                batch.append(rows[idx])
        streams.append(batch)
    return streams[0], streams[1], streams[2]


class Adam:
    """Adam with decoupled weight decay (beta1=0.9, beta2=0.999)."""

    def __init__(self, params: DetectorParams, lr: float, weight_decay: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.arrays.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= self.lr * self.weight_decay * p


def forward_batch(
    bound: BoundModel,
    real_normal: list[np.ndarray],
    pseudo_normal: list[np.ndarray],
    pseudo_abnormal: list[np.ndarray],
) -> BatchForward:
    """Run the detector over one batch and collect everything the losses need."""
    scores_abn, abn_embs = [], []
    for f in pseudo_abnormal:
        f_tilde, s = bound.forward_video(f)
        scores_abn.append(s)
        abn_embs.append(f_tilde)

    scores_norm, norm_embs = [], []
    for f in real_normal:
        f_tilde, s = bound.forward_video(f)
        scores_norm.append(s)
        norm_embs.append(f_tilde)

    fn_bar = ad.mean_over_axis(ad.stack_rows(norm_embs), 0) if norm_embs else None
    fnt_bar = None
    if pseudo_normal:
        pn_embs = [bound.forward_video(f)[0] for f in pseudo_normal]
        fnt_bar = ad.mean_over_axis(ad.stack_rows(pn_embs), 0)

    z_tensor = ad.stack_rows(abn_embs)
    bank = bound.bank("abnormal")
    q, _ = assignments_and_usage(z_tensor.data, bank.data, bound.config.tau)
    return BatchForward(
        scores_abn=scores_abn,
        scores_norm=scores_norm,
        fn_bar=fn_bar,
        fnt_bar=fnt_bar,
        q=q,
        z=z_tensor.data,
        bank_abn=bank,
        discriminate=bound.discriminate,
    )


@dataclass
class TrainResult:
    params: DetectorParams
    breakdowns: list[LossBreakdown]
    checkpoint_dir: Path | None
    loss_log: Path | None


def train(
    manifest: formats.DatasetManifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` Adam updates; write checkpoint + JSONL loss log under out_dir."""
    features = load_features(manifest)
    params = DetectorParams.init(model_cfg, cfg.seed)
    opt = Adam(params, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xBA7C4])))

    breakdowns: list[LossBreakdown] = []
    log_lines: list[str] = []
    for step in range(cfg.steps):
        rn, pn, pa = sample_batch(manifest, features, cfg, rng)
        g = ad.Graph()
        bound = BoundModel(params, g)
        batch = forward_batch(bound, rn, pn, pa)
        loss, breakdown = total_loss(batch, cfg.loss_weights)
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(step)
        g.backward(loss)
        opt.step({name: leaf.grad for name, leaf in bound.leaves.items()})
        breakdowns.append(breakdown)
        log_lines.append(json.dumps({"step": step, **breakdown.to_json()}, sort_keys=True))

    checkpoint_dir = loss_log = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_dir = out / "checkpoint"
        params.save(checkpoint_dir)
        loss_log = out / "loss_log.jsonl"
        loss_log.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return TrainResult(params=params, breakdowns=breakdowns, checkpoint_dir=checkpoint_dir, loss_log=loss_log)


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC by the Mann-Whitney rank statistic with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative frame")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average of 1-based ranks i+1..j
        i = j
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def frame_auc(traces: list[ScoreTrace], masks: dict[str, np.ndarray]) -> float:
    """Micro-averaged AUC over the concatenated frames of every trace."""
    scores, labels = [], []
    for t in traces:
        if t.video_id not in masks:
            raise ValueError(f"no mask for video {t.video_id!r}")
        m = masks[t.video_id]
        if len(m) != len(t.frame_scores):
            raise ValueError(f"{t.video_id}: mask length {len(m)} != trace length {len(t.frame_scores)}")
        scores.append(t.frame_scores)
        labels.append(m)
    return rank_auc(np.concatenate(scores), np.concatenate(labels))


@dataclass
class EvalResult:
    auc_micro: float
    auc_macro: float | None
    n_frames: int
    n_videos: int
    traces: list[ScoreTrace]


def evaluate(
    params: DetectorParams,
    manifest: formats.DatasetManifest,
    masks: dict[str, np.ndarray],
    out_dir: str | Path | None = None,
) -> EvalResult:
    """Score every manifest video at full length and report frame-level AUC.

    Videos absent from ``masks`` count as all-normal ground truth. Parameters
    are read-only throughout.
    """
    traces: list[ScoreTrace] = []
    for e in manifest.entries:
        f = formats.read_tensor(manifest.tensor_path(e)).astype(np.float64)
        bound = BoundModel(params, ad.Graph())
        _, s = bound.forward_video(f)
        frames = formats.expand_to_frames(s.data, e.frames_per_row, e.total_frames)
        traces.append(ScoreTrace(video_id=e.video_id, frame_scores=frames))

    full_masks = {
        t.video_id: masks.get(t.video_id, np.zeros(len(t.frame_scores), dtype=bool)) for t in traces
    }
    micro = frame_auc(traces, full_masks)
    per_video = []
    for t in traces:
        m = full_masks[t.video_id]
        if 0 < int(m.sum()) < m.size:
            per_video.append(rank_auc(t.frame_scores, m))
    macro = float(np.mean(per_video)) if per_video else None

    result = EvalResult(
        auc_micro=micro,
        auc_macro=macro,
        n_frames=int(sum(len(t.frame_scores) for t in traces)),
        n_videos=len(traces),
        traces=traces,
    )
    if out_dir is not None:
        out = Path(out_dir)
        (out / "traces").mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump({
                "auc_micro": result.auc_micro,
                "auc_macro": result.auc_macro,
                "n_frames": result.n_frames,
                "n_videos": result.n_videos,
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for t in traces:
            with open(out / "traces" / f"{t.video_id}.json", "w", encoding="utf-8") as fh:
                json.dump({"video_id": t.video_id, "frame_scores": [float(x) for x in t.frame_scores]}, fh)
                fh.write("\n")
    return result


def config_with(cfg: TrainConfig, **kwargs) -> TrainConfig:
    """Convenience: a copy of ``cfg`` with fields (incl. loss weights) replaced."""
    lw_fields = {f for f in LossWeights.__dataclass_fields__}
    lw_over = {k: v for k, v in kwargs.items() if k in lw_fields}
    rest = {k: v for k, v in kwargs.items() if k not in lw_fields}
    lw = replace(cfg.loss_weights, **lw_over) if lw_over else cfg.loss_weights
    return replace(cfg, loss_weights=lw, **rest)
