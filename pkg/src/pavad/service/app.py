"""FastAPI application wrapping the core pipeline.

Every endpoint is a stateless job runner: the request names input artifacts
and an output directory on the server's filesystem, the handler executes the
corresponding core operation, and the response summarizes what was written.
Validation and domain errors surface as 400s with a one-line detail.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from fastapi import FastAPI, HTTPException

import pavad

from .. import formats
from ..curation import (BalanceConfig, ClassSpec, CurationError, EmbeddingIndex,
                        InitImage, VlmClient, emit_generation_manifest, refine_prompts,
                        select_topk)
from ..gradcheck import run_gradient_suite
from ..model import DetectorParams
from ..profiles import get_profile
from ..simulate import Variant, generate, run_ablation
from ..training import TrainingDiverged, evaluate, train
from . import schemas as s


def _apply_overrides(obj, overrides) -> object:
    changes = {k: v for k, v in overrides.model_dump().items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


def _class_spec(m: s.ClassSpecModel) -> ClassSpec:
    kwargs = dict(class_name=m.class_name, positive_phrases=m.positive_phrases,
                  negative_phrases=m.negative_phrases, lam=m.lam, top_k=m.top_k,
                  template_phrases=m.template_phrases)
    if m.refinement_instruction:
        kwargs["refinement_instruction"] = m.refinement_instruction
    return ClassSpec(**kwargs)


def create_app() -> FastAPI:
    app = FastAPI(title="pavad", version=pavad.__version__)

    def fail(exc: Exception) -> HTTPException:
        return HTTPException(status_code=400, detail=str(exc))

    @app.get("/v1/health", response_model=s.HealthResponse)
    def health() -> s.HealthResponse:
        return s.HealthResponse(status="ok", version=pavad.__version__)

    @app.post("/v1/simulate", response_model=s.SimulateResponse)
    def simulate(req: s.SimulateRequest) -> s.SimulateResponse:
        profile = get_profile("sim")
        try:
            cfg = _apply_overrides(profile.sim, req.sim)
            cfg = dataclasses.replace(cfg, seed=req.seed)
            out = generate(cfg, req.out_dir)
            n_train = len(formats.read_manifest(out.train_manifest).entries)
            n_test = len(formats.read_manifest(out.test_manifest).entries)
        except (ValueError, OSError) as exc:
            raise fail(exc) from exc
        return s.SimulateResponse(
            out_dir=str(out.out_dir),
            train_manifest=str(out.train_manifest),
            test_manifest=str(out.test_manifest),
            masks=str(out.masks_path),
            n_train_videos=n_train,
            n_test_videos=n_test,
            mean_norm_real=out.mean_norms["real"],
            mean_norm_pseudo=out.mean_norms["pseudo"],
        )

    @app.post("/v1/train", response_model=s.TrainResponse)
    def train_endpoint(req: s.TrainRequest) -> s.TrainResponse:
        try:
            profile = get_profile(req.profile)
            model_cfg = _apply_overrides(profile.model, req.model)
            train_over = {k: v for k, v in req.train.model_dump().items() if v is not None}
            lw_fields = set(dataclasses.asdict(profile.train.loss_weights))
            lw = dataclasses.replace(profile.train.loss_weights,
                                     **{k: v for k, v in train_over.items() if k in lw_fields})
            cfg = dataclasses.replace(profile.train, seed=req.seed, loss_weights=lw,
                                      **{k: v for k, v in train_over.items() if k not in lw_fields})
            manifest = formats.read_manifest(req.manifest, training=True)
            result = train(manifest, model_cfg, cfg, req.out_dir)
        except TrainingDiverged as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        except (ValueError, OSError) as exc:
            raise fail(exc) from exc
        final = result.breakdowns[-1]
        return s.TrainResponse(
            checkpoint_dir=str(result.checkpoint_dir),
            loss_log=str(result.loss_log),
            steps=cfg.steps,
            final=s.LossBreakdownModel(**final.to_json()),
        )

    @app.post("/v1/evaluate", response_model=s.EvalResponse)
    def evaluate_endpoint(req: s.EvalRequest) -> s.EvalResponse:
        try:
            params = DetectorParams.load(req.checkpoint)
            manifest = formats.read_manifest(req.manifest)
            masks = formats.read_masks(req.masks, manifest)
            result = evaluate(params, manifest, masks, req.out_dir)
        except (ValueError, OSError) as exc:
            raise fail(exc) from exc
        out = Path(req.out_dir)
        return s.EvalResponse(
            auc_micro=result.auc_micro,
            auc_macro=result.auc_macro,
            n_frames=result.n_frames,
            n_videos=result.n_videos,
            metrics_path=str(out / "metrics.json"),
            traces_dir=str(out / "traces"),
        )

    @app.post("/v1/ablate", response_model=s.AblateResponse)
    def ablate(req: s.AblateRequest) -> s.AblateResponse:
        try:
            profile = get_profile(req.profile)
            sim_cfg = _apply_overrides(profile.sim, req.sim)
            train_over = {k: v for k, v in req.train.model_dump().items() if v is not None}
            lw_fields = set(dataclasses.asdict(profile.train.loss_weights))
            lw = dataclasses.replace(profile.train.loss_weights,
                                     **{k: v for k, v in train_over.items() if k in lw_fields})
            train_cfg = dataclasses.replace(profile.train, loss_weights=lw,
                                            **{k: v for k, v in train_over.items() if k not in lw_fields})
            variants = None
            if req.variants is not None:
                variants = [Variant(v.name, v.lambda1, v.lambda2) for v in req.variants]
            rows = run_ablation(sim_cfg, profile.model, train_cfg, req.out_dir, req.seeds, variants)
        except (ValueError, OSError, TrainingDiverged) as exc:
            raise fail(exc) from exc
        return s.AblateResponse(
            rows=[s.AblationRowModel(**r.to_json()) for r in rows],
            path=str(Path(req.out_dir) / "ablation.json"),
        )

    @app.post("/v1/grad-check", response_model=s.GradCheckResponse)
    def grad_check(req: s.GradCheckRequest) -> s.GradCheckResponse:
        report = run_gradient_suite(n_configs=req.n_configs, seed=req.seed, tol=req.tol,
                                    include_composite=req.include_composite)
        return s.GradCheckResponse(
            terms=report.terms, max_error=report.max_error, tol=report.tol,
            passed=report.passed, n_configs=report.n_configs, runtime_s=report.runtime_s,
        )

    @app.post("/v1/curation/select-inits", response_model=s.SelectInitsResponse)
    def select_inits(req: s.SelectInitsRequest) -> s.SelectInitsResponse:
        try:
            index = EmbeddingIndex.load(req.index_dir)
            balance = BalanceConfig(**req.balance.model_dump())
            images = index.images()
            result = []
            for class_model in req.classes:
                spec = _class_spec(class_model)
                picks = select_topk(images, spec, balance, index)
                result.append(s.ClassSelectionsModel(
                    class_name=spec.class_name,
                    selections=[s.SelectionModel(id=i, score=score,
                                                 source_path=index.records[i].source_path)
                                for i, score in picks],
                ))
        except (CurationError, OSError, KeyError) as exc:
            raise fail(exc) from exc
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "selections.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"classes": [c.model_dump() for c in result]}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return s.SelectInitsResponse(classes=result, path=str(path))

    @app.post("/v1/curation/refine-prompts", response_model=s.RefinePromptsResponse)
    def refine(req: s.RefinePromptsRequest) -> s.RefinePromptsResponse:
        try:
            with open(req.selections_path, "r", encoding="utf-8") as fh:
                selections = json.load(fh)["classes"]
            specs = {m.class_name: _class_spec(m) for m in req.classes}
            client = VlmClient.from_env(timeout_s=req.vlm.timeout_s) if req.vlm.use_vlm else None
            prompts = []
            for group in selections:
                spec = specs.get(group["class_name"])
                if spec is None:
                    raise CurationError(f"no class spec for {group['class_name']!r}")
                inits = [InitImage(s_["id"], s_["source_path"]) for s_ in group["selections"]]
                prompts.extend(refine_prompts(inits, spec, client, req.vlm.max_in_flight))
        except (CurationError, OSError, KeyError, json.JSONDecodeError) as exc:
            raise fail(exc) from exc
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "prompts.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([p.to_json() for p in prompts], fh, indent=2, sort_keys=True)
            fh.write("\n")
        n_fallback = sum(1 for p in prompts if p.provenance == "fallback")
        return s.RefinePromptsResponse(
            prompts=[s.RefinedPromptModel(**p.to_json()) for p in prompts],
            n_fallback=n_fallback, path=str(path),
        )

    @app.post("/v1/curation/gen-manifest", response_model=s.GenManifestResponse)
    def gen_manifest(req: s.GenManifestRequest) -> s.GenManifestResponse:
        try:
            profile = get_profile(req.profile)
            defaults = profile.generation
            for name in ("resolution", "frame_count", "fps", "sampling_steps", "guidance"):
                value = getattr(req, name)
                if value is not None:
                    defaults = dataclasses.replace(defaults, **{name: value})
            with open(req.selections_path, "r", encoding="utf-8") as fh:
                selections_doc = json.load(fh)["classes"]
            with open(req.prompts_path, "r", encoding="utf-8") as fh:
                prompts_doc = json.load(fh)
            from ..curation import RefinedPrompt
            prompts = [RefinedPrompt(**p) for p in prompts_doc]
            selections = []
            for group in selections_doc:
                for s_ in group["selections"]:
                    selections.append((group["class_name"], InitImage(s_["id"], s_["source_path"])))
            jobs = emit_generation_manifest(selections, prompts, defaults)
        except (CurationError, OSError, KeyError, TypeError, json.JSONDecodeError, ValueError) as exc:
            raise fail(exc) from exc
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "generation_manifest.json"
        formats.write_generation_manifest(jobs, path)
        return s.GenManifestResponse(n_jobs=len(jobs), path=str(path))

    return app
