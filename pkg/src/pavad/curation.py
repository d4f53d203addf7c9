"""Class-aware curation over precomputed vision-text embeddings.

Selection scores each candidate image against one positive class query and a
set of negative nuisance queries in the shared embedding space, optionally
smooths per-scene counts before ranking, and keeps the top K per class with
a minimum per-scene quota. Prompt refinement asks an external
chat-completions-style endpoint to ground the class name in the chosen init
image; offline it falls back to a deterministic template so batch runs never
abort. The output is a generation-job manifest for an image-to-video
sampler.

This module only consumes embedding files; producing them is the exporter's
job.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from . import formats
from .formats import GenerationJob

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-5
VLM_URL_ENV = "PAVAD_VLM_URL"
VLM_KEY_ENV = "PAVAD_VLM_KEY"


class CurationError(ValueError):
    pass


@dataclass
class EmbeddingRecord:
    id: str
    kind: str  # "image" | "text"
    vector: np.ndarray
    scene_id: str = ""
    source_path: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if self.kind not in ("image", "text"):
            raise CurationError(f"{self.id}: kind must be image or text, got {self.kind!r}")
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise CurationError(f"{self.id}: vector norm {norm:.6f} not within {UNIT_NORM_TOL} of 1")


@dataclass
class ClassSpec:
    class_name: str
    positive_phrases: list[str] = field(default_factory=list)
    negative_phrases: list[str] = field(default_factory=list)
    lam: float = 0.5
    top_k: int = 10
    template_phrases: list[str] = field(default_factory=lambda: ["natural movement", "fixed camera"])
    refinement_instruction: str = (
        "Describe the most plausible abnormal behavior of the given category that is "
        "consistent with the scene in the image, as a single short sentence. The camera is static."
    )

    def __post_init__(self):
        if not self.class_name:
            raise CurationError("class_name must be non-empty")
        if self.top_k < 1:
            raise CurationError("top_k must be >= 1")
        if not (0.0 <= self.lam <= 1.0):
            raise CurationError("lambda must lie in [0, 1]")

    def positive_query(self) -> str:
        return ", ".join([self.class_name] + self.positive_phrases)

    @classmethod
    def from_json(cls, doc: dict) -> "ClassSpec":
        kwargs = {"class_name": doc["class_name"]}
        for k in ("positive_phrases", "negative_phrases", "template_phrases",
                  "refinement_instruction", "top_k"):
            if k in doc:
                kwargs[k] = doc[k]
        if "lambda" in doc:
            kwargs["lam"] = doc["lambda"]
        return cls(**kwargs)


@dataclass
class BalanceConfig:
    alpha: float = 0.5
    min_quota_per_scene: int = 0
    enabled: bool = False
    subsample_scale: float = 1.0  # proportionality constant for count^alpha

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise CurationError("alpha must be finite and >= 0")
        if self.min_quota_per_scene < 0:
            raise CurationError("min_quota_per_scene must be >= 0")
        if self.subsample_scale <= 0:
            raise CurationError("subsample_scale must be > 0")


class EmbeddingIndex:
    """Embeddings loaded from tensor files + an index.json sidecar.

    Index schema: {"records": [{"id", "kind", "file", "row"?, "scene_id"?,
    "source_path"?}]} with vectors in PAVF files (rank-1, or rank-2 with a
    row offset). Dimension must be consistent across the whole index.
    """

    def __init__(self, records: list[EmbeddingRecord]):
        self.records: dict[str, EmbeddingRecord] = {}
        dim = None
        for r in records:
            if r.id in self.records:
                raise CurationError(f"duplicate embedding id {r.id!r}")
            if dim is None:
                dim = r.vector.size
            elif r.vector.size != dim:
                raise CurationError(f"{r.id}: dimension {r.vector.size} != index dimension {dim}")
            self.records[r.id] = r
        self.dim = dim or 0

    @classmethod
    def load(cls, index_dir: str | Path) -> "EmbeddingIndex":
        root = Path(index_dir)
        with open(root / "index.json", "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        cache: dict[str, np.ndarray] = {}
        records = []
        for item in doc["records"]:
            fname = item["file"]
            if fname not in cache:
                cache[fname] = formats.read_tensor(root / fname).astype(np.float64)
            arr = cache[fname]
            vec = arr[item["row"]] if arr.ndim == 2 else arr
            records.append(EmbeddingRecord(
                id=item["id"], kind=item["kind"], vector=vec,
                scene_id=item.get("scene_id", ""), source_path=item.get("source_path", ""),
            ))
        return cls(records)

    def images(self) -> list[EmbeddingRecord]:
        return sorted((r for r in self.records.values() if r.kind == "image"), key=lambda r: r.id)

    def text(self, phrase: str) -> EmbeddingRecord:
        rec = self.records.get(phrase)
        if rec is None or rec.kind != "text":
            raise CurationError(f"missing text embedding for phrase {phrase!r}")
        return rec


def score_image(img: EmbeddingRecord, pos_text: EmbeddingRecord,
                neg_texts: list[EmbeddingRecord], lam: float) -> float:
    """Class affinity minus lambda times the worst (max) nuisance similarity."""
    for other in [pos_text] + list(neg_texts):
        if other.vector.size != img.vector.size:
            raise CurationError(f"dimension mismatch: {img.id} vs {other.id}")
    pos = float(np.dot(img.vector, pos_text.vector))
    neg = max((float(np.dot(img.vector, t.vector)) for t in neg_texts), default=0.0)
    return pos - lam * neg


def select_topk(images: list[EmbeddingRecord], spec: ClassSpec, bal: BalanceConfig,
                index: EmbeddingIndex) -> list[tuple[str, float]]:
    """Top-K class-relevant images, optionally scene-balanced.

    With balancing on: each scene is first sub-sampled to its
    ceil(count^alpha * scale) best-scoring members (never more than it has),
    every scene then locks in its top ``min_quota_per_scene`` candidates, and
    the remaining slots fill by global score. Ties always break by id
    ascending; output is sorted by score descending.
    """
    if not images:
        raise CurationError("no candidate images")
    pos = index.text(spec.positive_query())
    negs = [index.text(p) for p in spec.negative_phrases]

    scored = [(img.id, score_image(img, pos, negs, spec.lam), img.scene_id) for img in images]
    order = lambda item: (-item[1], item[0])

    if not bal.enabled:
        ranked = sorted(scored, key=order)
        return [(i, s) for i, s, _ in ranked[:spec.top_k]]

    by_scene: dict[str, list] = {}
    for item in scored:
        by_scene.setdefault(item[2], []).append(item)

    pool = []
    for scene in sorted(by_scene):
        group = sorted(by_scene[scene], key=order)
        keep = min(len(group), math.ceil(len(group) ** bal.alpha * bal.subsample_scale))
        pool.extend(group[:keep])

    quota: list = []
    pool_by_scene: dict[str, list] = {}
    for item in sorted(pool, key=order):
        pool_by_scene.setdefault(item[2], []).append(item)
    for scene in sorted(pool_by_scene):
        quota.extend(pool_by_scene[scene][:bal.min_quota_per_scene])
    quota = sorted(quota, key=order)[:spec.top_k]

    chosen_ids = {i for i, _, _ in quota}
    fill = [item for item in sorted(pool, key=order) if item[0] not in chosen_ids]
    selected = quota + fill[:max(0, spec.top_k - len(quota))]
    return [(i, s) for i, s, _ in sorted(selected, key=order)]


@dataclass
class InitImage:
    id: str
    source_path: str


@dataclass
class RefinedPrompt:
    class_name: str
    init_id: str
    phrase: str
    full_prompt: str
    provenance: str  # "vlm" | "fallback"

    def to_json(self) -> dict:
        return {"class_name": self.class_name, "init_id": self.init_id, "phrase": self.phrase,
                "full_prompt": self.full_prompt, "provenance": self.provenance}


def build_full_prompt(phrase: str, template_phrases: list[str]) -> str:
    return ", ".join([phrase] + list(template_phrases))


def fallback_phrase(class_name: str) -> str:
    return f"Generate {class_name} behavior consistent with the scene"


def first_sentence(text: str) -> str:
    flat = " ".join(text.split())
    for i, c in enumerate(flat):
        if c in ".!?":
            return flat[:i + 1]
    return flat


@dataclass
class VlmConfig:
    url: str
    key: str = ""
    model: str = "default"
    timeout_s: float = 60.0


class VlmClient:
    """Minimal chat-completions client for image-grounded phrase refinement."""

    def __init__(self, cfg: VlmConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        headers = {"Authorization": f"Bearer {cfg.key}"} if cfg.key else {}
        self._http = httpx.Client(timeout=cfg.timeout_s, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, timeout_s: float = 60.0) -> "VlmClient | None":
        url = os.environ.get(VLM_URL_ENV, "")
        if not url:
            return None
        return cls(VlmConfig(url=url, key=os.environ.get(VLM_KEY_ENV, ""), timeout_s=timeout_s))

    def refine(self, image_path: str, instruction: str, class_name: str) -> str:
        with open(image_path, "rb") as fh:
            image_b64 = base64.b64encode(fh.read()).decode("ascii")
        body = {
            "model": self.cfg.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": f"{instruction}\nCategory: {class_name}"},
                    {"type": "image_url",
                     "image_url": {"url": f"data:image/jpeg;base64,{image_b64}"}},
                ],
            }],
        }
        resp = self._http.post(self.cfg.url, json=body)
        resp.raise_for_status()
        content = resp.json()["choices"][0]["message"]["content"]
        if not isinstance(content, str):
            raise CurationError(f"unexpected completion payload: {content!r}")
        return content

    def close(self) -> None:
        self._http.close()


def refine_prompt(init: InitImage, spec: ClassSpec, client: VlmClient | None) -> RefinedPrompt:
    """One refined prompt per init; endpoint failures fall back, never abort."""
    phrase = None
    provenance = "fallback"
    if client is not None:
        try:
            phrase = first_sentence(client.refine(init.source_path, spec.refinement_instruction,
                                                  spec.class_name))
            provenance = "vlm"
        except Exception as exc:  # noqa: BLE001 - any endpoint/file failure degrades to fallback
            log.warning("prompt refinement failed for %s/%s (%s); using fallback",
                        spec.class_name, init.id, exc)
            phrase = None
    if not phrase:
        phrase = fallback_phrase(spec.class_name)
        provenance = "fallback"
    return RefinedPrompt(
        class_name=spec.class_name,
        init_id=init.id,
        phrase=phrase,
        full_prompt=build_full_prompt(phrase, spec.template_phrases),
        provenance=provenance,
    )


def refine_prompts(inits: list[InitImage], spec: ClassSpec, client: VlmClient | None,
                   max_in_flight: int = 4) -> list[RefinedPrompt]:
    """Concurrent refinement with a bounded in-flight cap; output ordered by init id."""
    ordered = sorted(inits, key=lambda i: i.id)
    if client is None or max_in_flight <= 1:
        return [refine_prompt(i, spec, client) for i in ordered]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda i: refine_prompt(i, spec, client), ordered))


@dataclass
class GenerationDefaults:
    resolution: tuple[int, int] = (832, 480)
    frame_count: int = 81
    fps: int = 16
    sampling_steps: int = 25
    guidance: tuple[float, float] = (3.5, 3.5)


def emit_generation_manifest(selections: list[tuple[str, InitImage]],
                             prompts: list[RefinedPrompt],
                             defaults: GenerationDefaults | None = None) -> list[GenerationJob]:
    """One synthesis job per (class, init) pair, carrying the sampler defaults."""
    defaults = defaults or GenerationDefaults()
    by_key = {(p.class_name, p.init_id): p for p in prompts}
    if len(by_key) != len(prompts):
        raise CurationError("duplicate prompts for the same (class, init) pair")
    if len(selections) != len(prompts):
        raise CurationError(f"{len(selections)} selections but {len(prompts)} prompts")
    jobs = []
    for class_name, init in selections:
        prompt = by_key.get((class_name, init.id))
        if prompt is None:
            raise CurationError(f"no prompt for class {class_name!r} init {init.id!r}")
        jobs.append(GenerationJob(
            class_name=class_name,
            init_image_path=init.source_path,
            prompt=prompt.full_prompt,
            resolution=defaults.resolution,
            frame_count=defaults.frame_count,
            fps=defaults.fps,
            sampling_steps=defaults.sampling_steps,
            guidance=defaults.guidance,
        ))
    return jobs
