"""Detector network: temporal encoder, dual memory banks, score head, domain head.

Segment features (TxD) are embedded by a kernel-3 temporal convolution
followed by one multi-head self-attention block with a residual connection.
Two learnable banks of slot prototypes (abnormal / normal) are read by
scaled dot-product attention; the concatenation of the embedding with the
summed bank reads feeds a sigmoid score head. A small two-layer perceptron
discriminates real-vs-pseudo stream means for adversarial alignment.

Parameters live as float64 numpy arrays in ``DetectorParams``; ``bind`` wraps
them as autodiff leaves on a per-step graph. Checkpoints are PAVF tensors in
a directory plus a JSON index mapping name -> {file, shape}.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import formats


@dataclass
class ModelConfig:
    feature_dim: int
    model_dim: int = 128
    heads: int = 4
    slots_abnormal: int = 100
    slots_normal: int = 100
    tau: float = 0.1
    input_scale: float = 1.0  # fixed feature prescale; multiplicative, so domain norm ratios survive

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.slots_abnormal < 1 or self.slots_normal < 1:
            raise ValueError("memory banks need at least one slot")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    def to_json(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "slots_abnormal": self.slots_abnormal,
            "slots_normal": self.slots_normal,
            "tau": self.tau,
            "input_scale": self.input_scale,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_slots(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    slots = _uniform(rng, (k, d), d)
    # degenerate all-zero rows (measure zero, but contractually excluded) are re-drawn
    for i in range(k):
        while not np.any(slots[i]):
            slots[i] = _uniform(rng, (d,), d)
    return slots


@dataclass
class DetectorParams:
    """All learnable arrays, keyed by dotted names stable across save/load."""

    config: ModelConfig
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "DetectorParams":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        D, d = config.feature_dim, config.model_dim
        d2 = max(1, d // 2)
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        arrays["encoder.conv_w"] = _uniform(rng, (d, D, 3), 3 * D)
        arrays["encoder.conv_b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            arrays[f"encoder.{name}"] = _uniform(rng, (d, d), d)
        arrays["memory.abnormal"] = _init_slots(rng, config.slots_abnormal, d)
        arrays["memory.normal"] = _init_slots(rng, config.slots_normal, d)
        arrays["head.weight"] = _uniform(rng, (1, 2 * d), 2 * d)
        arrays["head.bias"] = np.zeros(())
        arrays["disc.w1"] = _uniform(rng, (d2, d), d)
        arrays["disc.b1"] = np.zeros(d2)
        arrays["disc.w2"] = _uniform(rng, (1, d2), d2)
        arrays["disc.b2"] = np.zeros(())
        return cls(config=config, arrays=arrays)

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index: dict = {"model": self.config.to_json(), "tensors": {}}
        for name, arr in self.arrays.items():
            fname = name.replace(".", "_") + ".pavf"
            flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 2 else (arr.reshape(1) if arr.ndim == 0 else arr)
            formats.write_tensor(flat, out / fname)
            index["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
        with open(out / "index.json", "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> "DetectorParams":
        ckpt = Path(ckpt_dir)
        with open(ckpt / "index.json", "r", encoding="utf-8") as fh:
            index = json.load(fh)
        config = ModelConfig.from_json(index["model"])
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, meta in index["tensors"].items():
            arr = formats.read_tensor(ckpt / meta["file"]).astype(np.float64)
            arrays[name] = arr.reshape(meta["shape"])
        return cls(config=config, arrays=arrays)


class BoundModel:
    """Parameters wrapped as leaves on one graph, plus the forward operations."""

    def __init__(self, params: DetectorParams, graph: ad.Graph):
        self.config = params.config
        self.graph = graph
        self.leaves = {name: graph.leaf(arr) for name, arr in params.arrays.items()}

    def encode(self, f: np.ndarray | ad.Tensor) -> ad.Tensor:
        """TxD segment features -> Txd embedding (conv, then residual attention)."""
        x = f if isinstance(f, ad.Tensor) else self.graph.constant(np.asarray(f, dtype=np.float64))
        if x.data.ndim != 2 or x.data.shape[1] != self.config.feature_dim:
            raise ValueError(f"expected Tx{self.config.feature_dim} features, got {x.data.shape}")
        if self.config.input_scale != 1.0:
            x = ad.scalar_mul(x, self.config.input_scale)
        h = ad.conv1d_same(x, self.leaves["encoder.conv_w"], self.leaves["encoder.conv_b"])
        q = h @ self.leaves["encoder.wq"]
        k = h @ self.leaves["encoder.wk"]
        v = h @ self.leaves["encoder.wv"]
        attn = ad.scaled_dot_attention(q, k, v, self.config.heads) @ self.leaves["encoder.wo"]
        return h + attn

    def bank(self, role: str) -> ad.Tensor:
        if role not in ("abnormal", "normal"):
            raise ValueError(f"unknown bank role {role!r}")
        return self.leaves[f"memory.{role}"]

    def memory_read(self, f_tilde: ad.Tensor, role: str) -> ad.Tensor:
        """Attention read: softmax(f_tilde slots^T / sqrt(d)) @ slots, per time step."""
        slots = self.bank(role)
        if f_tilde.data.shape[1] != slots.data.shape[1]:
            raise ValueError(f"dim mismatch: {f_tilde.data.shape} vs bank {slots.data.shape}")
        logits = ad.scalar_mul(f_tilde @ ad.transpose(slots), 1.0 / np.sqrt(self.config.model_dim))
        return ad.softmax_last_dim(logits) @ slots

    def score(self, f_tilde: ad.Tensor, h_abn: ad.Tensor, h_norm: ad.Tensor) -> ad.Tensor:
        """Per-segment anomaly probabilities in (0,1), shape (T,)."""
        cat = ad.concat_last_dim(f_tilde, h_abn + h_norm)
        logits = cat @ ad.transpose(self.leaves["head.weight"]) + self.leaves["head.bias"]
        return ad.reshape(ad.sigmoid(logits), (f_tilde.data.shape[0],))

    def forward_video(self, f: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
        """Full per-video pass; returns (embedding Txd, scores (T,))."""
        f_tilde = self.encode(f)
        h_abn = self.memory_read(f_tilde, "abnormal")
        h_norm = self.memory_read(f_tilde, "normal")
        return f_tilde, self.score(f_tilde, h_abn, h_norm)

    def discriminate(self, f_bar: ad.Tensor) -> ad.Tensor:
        """Domain probability for a pooled d-vector (apply grad_reverse upstream)."""
        x = ad.reshape(f_bar, (1, self.config.model_dim))
        h = ad.relu(x @ ad.transpose(self.leaves["disc.w1"]) + self.leaves["disc.b1"])
        out = ad.sigmoid(h @ ad.transpose(self.leaves["disc.w2"]) + self.leaves["disc.b2"])
        return ad.reshape(out, ())


def assignments_and_usage(z: np.ndarray, slots: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Soft assignment of unfolded abnormal embeddings to bank slots.

    Rows of ``z`` ((Ba*T)xd) and the slots are l2-normalized, cosine logits
    are tempered by ``tau``, and softmax rows give Q; the usage vector u is
    the column mean of Q. Each Q row sums to 1, and so does u.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if z.ndim != 2 or slots.ndim != 2 or z.shape[1] != slots.shape[1]:
        raise ValueError(f"shape mismatch: z {z.shape} vs slots {slots.shape}")
    zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    mn = slots / np.maximum(np.linalg.norm(slots, axis=1, keepdims=True), 1e-12)
    logits = (zn @ mn.T) / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    q = e / e.sum(axis=1, keepdims=True)
    u = q.mean(axis=0)
    return q, u


def usage_entropy(u: np.ndarray) -> float:
    """Shannon entropy of the slot-usage distribution, in nats."""
    u = np.asarray(u, dtype=np.float64)
    nz = u[u > 0]
    return float(-(nz * np.log(nz)).sum())
