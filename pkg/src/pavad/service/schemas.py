"""Request/response models for the HTTP service.

Field names mirror the core config dataclasses so a config file, a CLI flag,
and a request body all speak the same vocabulary. Unset override fields mean
"keep the profile default".
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field


class HealthResponse(BaseModel):
    status: str
    version: str


# --- simulate ---------------------------------------------------------------

class SimOverrides(BaseModel):
    dim: int | None = None
    videos_per_stream: int | None = None
    test_videos_per_class: int | None = None
    rows_per_video: int | None = None
    frames_per_row: int | None = None
    normal_mean_norm: float | None = None
    pseudo_norm_scale: float | None = None
    anomaly_fraction: float | None = None
    n_abnormal_modes: int | None = None
    mode_skew: float | None = None
    direction_spread: float | None = None
    mode_offset: float | None = None
    norm_jitter: float | None = None


class SimulateRequest(BaseModel):
    out_dir: str
    seed: int = 0
    sim: SimOverrides = Field(default_factory=SimOverrides)


class SimulateResponse(BaseModel):
    out_dir: str
    train_manifest: str
    test_manifest: str
    masks: str
    n_train_videos: int
    n_test_videos: int
    mean_norm_real: float
    mean_norm_pseudo: float


# --- train / eval -----------------------------------------------------------

class TrainOverrides(BaseModel):
    steps: int | None = None
    learning_rate: float | None = None
    weight_decay: float | None = None
    batch_videos_per_stream: int | None = None
    segment_number: int | None = None
    random_crop: bool | None = None
    lambda1: float | None = None
    lambda2: float | None = None
    lambda_da: float | None = None
    lambda_dist: float | None = None
    beta: float | None = None
    epsilon: float | None = None
    topk: int | None = None


class ModelOverrides(BaseModel):
    feature_dim: int | None = None
    model_dim: int | None = None
    heads: int | None = None
    slots_abnormal: int | None = None
    slots_normal: int | None = None
    tau: float | None = None
    input_scale: float | None = None


class TrainRequest(BaseModel):
    manifest: str
    out_dir: str
    profile: str = "sim"
    seed: int = 0
    train: TrainOverrides = Field(default_factory=TrainOverrides)
    model: ModelOverrides = Field(default_factory=ModelOverrides)


class LossBreakdownModel(BaseModel):
    mil_rank: float
    mil_cls: float
    da: float
    upd: float
    total: float


class TrainResponse(BaseModel):
    checkpoint_dir: str
    loss_log: str
    steps: int
    final: LossBreakdownModel


class EvalRequest(BaseModel):
    checkpoint: str
    manifest: str
    masks: str
    out_dir: str


class EvalResponse(BaseModel):
    auc_micro: float
    auc_macro: float | None
    n_frames: int
    n_videos: int
    metrics_path: str
    traces_dir: str


# --- ablation / gradient check ----------------------------------------------

class VariantModel(BaseModel):
    name: str
    lambda1: float
    lambda2: float


class AblateRequest(BaseModel):
    out_dir: str
    profile: str = "sim"
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: list[VariantModel] | None = None
    train: TrainOverrides = Field(default_factory=TrainOverrides)
    sim: SimOverrides = Field(default_factory=SimOverrides)


class AblationRowModel(BaseModel):
    variant: str
    seed: int
    auc_micro: float
    usage_entropy: float


class AblateResponse(BaseModel):
    rows: list[AblationRowModel]
    path: str


class GradCheckRequest(BaseModel):
    n_configs: int = 20
    seed: int = 0
    tol: float = 1e-4
    include_composite: bool = True


class GradCheckResponse(BaseModel):
    terms: dict[str, float]
    max_error: float
    tol: float
    passed: bool
    n_configs: int
    runtime_s: float


# --- curation ---------------------------------------------------------------

class ClassSpecModel(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    class_name: str
    positive_phrases: list[str] = Field(default_factory=list)
    negative_phrases: list[str] = Field(default_factory=list)
    lam: float = Field(default=0.5, alias="lambda")
    top_k: int = 10
    template_phrases: list[str] = Field(default_factory=lambda: ["natural movement", "fixed camera"])
    refinement_instruction: str = ""


class BalanceModel(BaseModel):
    alpha: float = 0.5
    min_quota_per_scene: int = 0
    enabled: bool = False
    subsample_scale: float = 1.0


class SelectInitsRequest(BaseModel):
    index_dir: str
    classes: list[ClassSpecModel]
    balance: BalanceModel = Field(default_factory=BalanceModel)
    out_dir: str


class SelectionModel(BaseModel):
    id: str
    score: float
    source_path: str


class ClassSelectionsModel(BaseModel):
    class_name: str
    selections: list[SelectionModel]


class SelectInitsResponse(BaseModel):
    classes: list[ClassSelectionsModel]
    path: str


class VlmSettings(BaseModel):
    use_vlm: bool = True  # False forces the deterministic offline fallback
    timeout_s: float = 60.0
    max_in_flight: int = 4


class RefinePromptsRequest(BaseModel):
    selections_path: str
    classes: list[ClassSpecModel]
    out_dir: str
    vlm: VlmSettings = Field(default_factory=VlmSettings)


class RefinedPromptModel(BaseModel):
    class_name: str
    init_id: str
    phrase: str
    full_prompt: str
    provenance: str


class RefinePromptsResponse(BaseModel):
    prompts: list[RefinedPromptModel]
    n_fallback: int
    path: str


class GenManifestRequest(BaseModel):
    selections_path: str
    prompts_path: str
    out_dir: str
    profile: str = "sim"
    resolution: tuple[int, int] | None = None
    frame_count: int | None = None
    fps: int | None = None
    sampling_steps: int | None = None
    guidance: tuple[float, float] | None = None


class GenManifestResponse(BaseModel):
    n_jobs: int
    path: str
