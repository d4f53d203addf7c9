import itertools
import json

import httpx
import numpy as np
import pytest

from pavad import formats
from pavad.curation import (BalanceConfig, ClassSpec, CurationError, EmbeddingIndex,
                            EmbeddingRecord, GenerationDefaults, InitImage, RefinedPrompt,
                            VlmClient, VlmConfig, build_full_prompt, emit_generation_manifest,
                            first_sentence, refine_prompt, refine_prompts, score_image,
                            select_topk)

rng = np.random.default_rng(42)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def rec(id, vec, kind="image", scene="s0"):
    return EmbeddingRecord(id=id, kind=kind, vector=unit(vec), scene_id=scene,
                           source_path=f"/imgs/{id}.jpg")


class TestScoreImage:
    def test_orthogonal_negative(self):
        s = score_image(rec("i", [1, 0]), rec("p", [1, 0], "text"), [rec("n", [0, 1], "text")], 0.5)
        assert s == pytest.approx(1.0, abs=1e-12)

    def test_lambda_zero_reduces_to_positive_similarity(self):
        img = rec("i", rng.standard_normal(8))
        pos = rec("p", rng.standard_normal(8), "text")
        negs = [rec(f"n{j}", rng.standard_normal(8), "text") for j in range(3)]
        assert score_image(img, pos, negs, 0.0) == pytest.approx(
            float(np.dot(img.vector, pos.vector)), abs=1e-12)

    def test_hand_case(self):
        s = score_image(rec("i", [0.6, 0.8]), rec("p", [1, 0], "text"),
                        [rec("n", [0, 1], "text")], 1.0)
        assert s == pytest.approx(-0.2, abs=1e-12)

    def test_empty_negatives_aggregate_zero(self):
        img = rec("i", [0.6, 0.8])
        assert score_image(img, rec("p", [1, 0], "text"), [], 1.0) == pytest.approx(0.6)

    def test_scale_free(self):
        raw = rng.standard_normal(16)
        a = rec("a", raw)
        b = rec("b", 3.0 * raw)
        pos = rec("p", rng.standard_normal(16), "text")
        negs = [rec("n", rng.standard_normal(16), "text")]
        assert abs(score_image(a, pos, negs, 0.7) - score_image(b, pos, negs, 0.7)) <= 1e-6

    def test_lambda_monotone_when_max_negative_positive(self):
        img = rec("i", [1, 0, 0])
        pos = rec("p", [0.5, 0.5, np.sqrt(0.5)], "text")
        negs = [rec("n", [0.9, np.sqrt(1 - 0.81), 0], "text")]
        last = np.inf
        for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
            s = score_image(img, pos, negs, lam)
            assert s <= last + 1e-12
            last = s

    def test_dimension_mismatch(self):
        with pytest.raises(CurationError, match="dimension"):
            score_image(rec("i", [1, 0]), rec("p", [1, 0, 0], "text"), [], 0.5)


def build_index(images, extra_texts=()):
    """images: list of (id, vector, scene). Text keys cover one class spec."""
    spec = ClassSpec(class_name="road accidents", positive_phrases=["roadway"],
                     negative_phrases=["logo"], lam=0.5, top_k=3)
    records = [rec(i, v, scene=s) for i, v, s in images]
    records.append(rec(spec.positive_query(), [1, 0, 0, 0], "text"))
    records.append(rec("logo", [0, 0, 0, 1], "text"))
    for phrase, vec in extra_texts:
        records.append(rec(phrase, vec, "text"))
    return spec, EmbeddingIndex(records)


class TestSelectTopk:
    def test_direct_ranking(self):
        spec, index = build_index([
            ("a", [0.9, np.sqrt(1 - 0.81), 0, 0], "s0"),
            ("b", [0.5, np.sqrt(1 - 0.25), 0, 0], "s0"),
            ("c", [0.1, np.sqrt(1 - 0.01), 0, 0], "s1"),
        ])
        spec.top_k = 2
        picks = select_topk(index.images(), spec, BalanceConfig(enabled=False), index)
        assert [p[0] for p in picks] == ["a", "b"]
        assert picks[0][1] == pytest.approx(0.9, abs=1e-12)

    def test_matches_exhaustive_sort_oracle(self):
        for trial in range(25):
            r = np.random.default_rng(trial)
            n = int(r.integers(1, 21))
            images = [(f"img{i:02d}", r.standard_normal(4), f"s{i % 3}") for i in range(n)]
            spec, index = build_index(images)
            spec.top_k = int(r.integers(1, n + 1))
            picks = select_topk(index.images(), spec, BalanceConfig(enabled=False), index)
            pos = index.text(spec.positive_query())
            negs = [index.text(p) for p in spec.negative_phrases]
            oracle = sorted(
                ((img.id, score_image(img, pos, negs, spec.lam)) for img in index.images()),
                key=lambda t: (-t[1], t[0]))[:spec.top_k]
            assert picks == oracle

    def test_alpha_zero_uniform_smoothing(self):
        r = np.random.default_rng(5)
        images = [(f"img{i:02d}", r.standard_normal(4), f"s{i % 4}") for i in range(16)]
        spec, index = build_index(images)
        spec.top_k = 16
        bal = BalanceConfig(alpha=0.0, min_quota_per_scene=0, enabled=True, subsample_scale=2.0)
        picks = select_topk(index.images(), spec, bal, index)
        # every scene shrinks to ceil(2.0) = 2 candidates -> pool of 8
        assert len(picks) == 8
        scenes = [index.records[i].scene_id for i, _ in picks]
        assert all(scenes.count(s) == 2 for s in set(scenes))

    def test_quota_against_brute_force(self):
        for trial in range(10):
            r = np.random.default_rng(100 + trial)
            images = [(f"img{i:02d}", r.standard_normal(4), f"s{i % 3}") for i in range(12)]
            spec, index = build_index(images)
            spec.top_k = 4
            bal = BalanceConfig(alpha=1.0, min_quota_per_scene=1, enabled=True)
            picks = select_topk(index.images(), spec, bal, index)
            assert len(picks) == 4

            pos = index.text(spec.positive_query())
            negs = [index.text(p) for p in spec.negative_phrases]
            scored = {img.id: score_image(img, pos, negs, spec.lam) for img in index.images()}
            scene_of = {img.id: img.scene_id for img in index.images()}
            best, best_ids = -np.inf, None
            for combo in itertools.combinations(sorted(scored), 4):
                covered = {scene_of[i] for i in combo}
                if len(covered) < 3:
                    continue
                total = sum(scored[i] for i in combo)
                if total > best + 1e-12:
                    best, best_ids = total, set(combo)
            assert {p[0] for p in picks} == best_ids
            assert {scene_of[p[0]] for p in picks} == {"s0", "s1", "s2"}

    def test_missing_text_embedding(self):
        spec, index = build_index([("a", [1, 0, 0, 0], "s0")])
        spec.negative_phrases = ["unseen phrase"]
        with pytest.raises(CurationError, match="missing text embedding"):
            select_topk(index.images(), spec, BalanceConfig(), index)

    def test_empty_candidates(self):
        spec, index = build_index([("a", [1, 0, 0, 0], "s0")])
        with pytest.raises(CurationError, match="no candidate"):
            select_topk([], spec, BalanceConfig(), index)

    def test_exact_score_ties_break_by_id(self):
        v = unit([0.4, 0.3, 0.2, 0.1])
        spec, index = build_index([("zeta", v, "s0"), ("alpha", v, "s0"), ("mid", v, "s1")])
        spec.top_k = 2
        picks = select_topk(index.images(), spec, BalanceConfig(enabled=False), index)
        assert [p[0] for p in picks] == ["alpha", "mid"]

    def test_score_range_bound(self):
        r = np.random.default_rng(8)
        for _ in range(50):
            lam = float(r.uniform(0, 1))
            img = rec("i", r.standard_normal(6))
            pos = rec("p", r.standard_normal(6), "text")
            negs = [rec(f"n{j}", r.standard_normal(6), "text") for j in range(3)]
            s = score_image(img, pos, negs, lam)
            assert -1 - lam <= s <= 1 + lam


class TestIndexIO:
    def test_load_from_tensor_files(self, tmp_path):
        vecs = np.stack([unit(rng.standard_normal(6)) for _ in range(3)]).astype(np.float32)
        formats.write_tensor(vecs, tmp_path / "images.pavf")
        formats.write_tensor(unit(rng.standard_normal(6)).astype(np.float32),
                             tmp_path / "text.pavf")
        index_doc = {"records": [
            {"id": f"img{i}", "kind": "image", "file": "images.pavf", "row": i,
             "scene_id": f"s{i}", "source_path": f"/x/{i}.jpg"} for i in range(3)
        ] + [{"id": "a phrase", "kind": "text", "file": "text.pavf"}]}
        (tmp_path / "index.json").write_text(json.dumps(index_doc), encoding="utf-8")
        index = EmbeddingIndex.load(tmp_path)
        assert index.dim == 6
        assert len(index.images()) == 3
        assert index.text("a phrase").kind == "text"

    def test_unit_norm_enforced(self):
        with pytest.raises(CurationError, match="norm"):
            EmbeddingRecord(id="bad", kind="image", vector=np.array([1.0, 1.0]))

    def test_dim_consistency(self):
        with pytest.raises(CurationError, match="dimension"):
            EmbeddingIndex([rec("a", [1, 0]), rec("b", [1, 0, 0])])

    def test_duplicate_ids(self):
        with pytest.raises(CurationError, match="duplicate"):
            EmbeddingIndex([rec("a", [1, 0]), rec("a", [0, 1])])


class TestRefinePrompt:
    def test_fallback_exact_string(self):
        spec = ClassSpec(class_name="explosion",
                         template_phrases=["natural movement", "fixed camera"])
        out = refine_prompt(InitImage("i0", "/none.jpg"), spec, None)
        assert out.full_prompt == ("Generate explosion behavior consistent with the scene, "
                                   "natural movement, fixed camera")
        assert out.provenance == "fallback"

    def test_fallback_deterministic(self):
        spec = ClassSpec(class_name="fighting")
        a = refine_prompt(InitImage("i0", "/none.jpg"), spec, None)
        b = refine_prompt(InitImage("i0", "/none.jpg"), spec, None)
        assert a == b

    def _client(self, handler):
        return VlmClient(VlmConfig(url="http://vlm.test/v1/chat/completions", key="k"),
                         transport=httpx.MockTransport(handler))

    def _image(self, tmp_path):
        p = tmp_path / "init.jpg"
        p.write_bytes(b"\xff\xd8fakejpeg")
        return str(p)

    def test_multi_sentence_truncated(self, tmp_path):
        def handler(request):
            body = json.loads(request.content)
            assert body["messages"][0]["content"][1]["type"] == "image_url"
            return httpx.Response(200, json={"choices": [{"message": {"content":
                "Generate a crowd brawl near the kiosk. Then more text.\nAnd a third line."}}]})

        spec = ClassSpec(class_name="fighting")
        out = refine_prompt(InitImage("i0", self._image(tmp_path)), spec, self._client(handler))
        assert out.phrase == "Generate a crowd brawl near the kiosk."
        assert out.provenance == "vlm"

    def test_refined_richer_than_coarse(self, tmp_path):
        refined_text = ("Generate Store theft involves an individual removing merchandise "
                        "from shelves, concealing it in a backpack, and evading "
                        "surveillance cameras.")

        def handler(request):
            return httpx.Response(200, json={"choices": [{"message": {"content": refined_text}}]})

        spec = ClassSpec(class_name="Shoplifting")
        out = refine_prompt(InitImage("i0", self._image(tmp_path)), spec, self._client(handler))
        coarse = f"Generate {spec.class_name}"
        assert len(out.phrase.split()) >= len(coarse.split())
        assert "theft" in out.phrase and "merchandise" in out.phrase

    def test_endpoint_error_falls_back_without_abort(self, tmp_path):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                return httpx.Response(500, text="boom")
            return httpx.Response(200, json={"choices": [{"message": {"content": "Generate x."}}]})

        spec = ClassSpec(class_name="robbery")
        inits = [InitImage("a", self._image(tmp_path)), InitImage("b", self._image(tmp_path))]
        outs = refine_prompts(inits, spec, self._client(handler), max_in_flight=1)
        assert [o.init_id for o in outs] == ["a", "b"]
        assert outs[0].provenance == "fallback"
        assert outs[1].provenance == "vlm"

    def test_results_ordered_by_init_id_with_concurrency(self, tmp_path):
        def handler(request):
            return httpx.Response(200, json={"choices": [{"message": {"content": "Generate y."}}]})

        spec = ClassSpec(class_name="abuse")
        inits = [InitImage(f"i{j}", self._image(tmp_path)) for j in (3, 1, 2, 0)]
        outs = refine_prompts(inits, spec, self._client(handler), max_in_flight=4)
        assert [o.init_id for o in outs] == ["i0", "i1", "i2", "i3"]

    def test_first_sentence(self):
        assert first_sentence("One. Two.") == "One."
        assert first_sentence("No terminator here") == "No terminator here"
        assert first_sentence("  spaced\nacross lines! more") == "spaced across lines!"

    def test_from_env_absent_or_unreachable(self, tmp_path, monkeypatch):
        monkeypatch.delenv("PAVAD_VLM_URL", raising=False)
        assert VlmClient.from_env() is None

        monkeypatch.setenv("PAVAD_VLM_URL", "http://127.0.0.1:1/v1/chat/completions")
        monkeypatch.setenv("PAVAD_VLM_KEY", "secret")
        client = VlmClient.from_env(timeout_s=0.2)
        assert client is not None
        spec = ClassSpec(class_name="vandalism")
        out = refine_prompt(InitImage("i0", self._image(tmp_path)), spec, client)
        assert out.provenance == "fallback"
        assert out.phrase == "Generate vandalism behavior consistent with the scene"
        client.close()


class TestGenerationManifest:
    def _pairs(self, n_classes, n_inits):
        selections, prompts = [], []
        for c in range(n_classes):
            cname = f"class{c:02d}"
            for i in range(n_inits):
                init = InitImage(f"init{i:02d}", f"/imgs/{cname}/{i}.jpg")
                selections.append((cname, init))
                prompts.append(RefinedPrompt(
                    class_name=cname, init_id=init.id, phrase=f"Generate {cname} behavior",
                    full_prompt=build_full_prompt(f"Generate {cname} behavior", ["fixed camera"]),
                    provenance="fallback"))
        return selections, prompts

    def test_counts_14x10(self):
        selections, prompts = self._pairs(14, 10)
        jobs = emit_generation_manifest(selections, prompts)
        assert len(jobs) == 140
        assert jobs[0].resolution == (832, 480)
        assert jobs[0].frame_count == 81
        assert jobs[0].fps == 16
        assert jobs[0].sampling_steps == 25
        assert jobs[0].guidance == (3.5, 3.5)

    def test_counts_13x20_with_profile_guidance(self):
        selections, prompts = self._pairs(13, 20)
        jobs = emit_generation_manifest(selections, prompts,
                                        GenerationDefaults(guidance=(6.5, 4.5)))
        assert len(jobs) == 260
        assert all(j.guidance == (6.5, 4.5) for j in jobs)

    def test_empty(self):
        assert emit_generation_manifest([], []) == []

    def test_count_mismatch(self):
        selections, prompts = self._pairs(2, 2)
        with pytest.raises(CurationError, match="selections but"):
            emit_generation_manifest(selections, prompts[:-1])

    def test_missing_prompt_for_pair(self):
        selections, prompts = self._pairs(2, 2)
        prompts[-1] = RefinedPrompt(class_name="other", init_id="x", phrase="p",
                                    full_prompt="p", provenance="fallback")
        with pytest.raises(CurationError, match="no prompt"):
            emit_generation_manifest(selections, prompts)


class TestClassSpec:
    def test_validation(self):
        with pytest.raises(CurationError, match="class_name"):
            ClassSpec(class_name="")
        with pytest.raises(CurationError, match="top_k"):
            ClassSpec(class_name="x", top_k=0)
        with pytest.raises(CurationError, match="lambda"):
            ClassSpec(class_name="x", lam=1.5)

    def test_positive_query_concatenation(self):
        spec = ClassSpec(class_name="road accidents", positive_phrases=["roadway", "vehicles"])
        assert spec.positive_query() == "road accidents, roadway, vehicles"

    def test_from_json_lambda_alias(self):
        spec = ClassSpec.from_json({"class_name": "x", "lambda": 0.3, "top_k": 2})
        assert spec.lam == 0.3 and spec.top_k == 2

    def test_balance_validation(self):
        with pytest.raises(CurationError, match="alpha"):
            BalanceConfig(alpha=-1.0)
        with pytest.raises(CurationError, match="subsample_scale"):
            BalanceConfig(subsample_scale=0.0)
