import hashlib
import json

import numpy as np
import pytest

from pavad import formats
from pavad.model import DetectorParams, ModelConfig
from pavad.profiles import get_profile
from pavad.simulate import SimConfig, generate
from pavad.training import (Adam, ScoreTrace, TrainConfig, TrainingDiverged, config_with,
                            evaluate, frame_auc, load_features, rank_auc, sample_batch,
                            sample_rows, train)


def trapezoid_auc(scores, labels):
    """Independent oracle: explicit threshold sweep + trapezoid integration."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = labels.sum()
    neg = labels.size - pos
    points = [(0.0, 0.0)]
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        points.append(((pred & ~labels).sum() / neg, (pred & labels).sum() / pos))
    xs, ys = zip(*points)
    trapz = getattr(np, "trapezoid", np.trapz)
    return float(trapz(ys, xs))


class TestSampleRows:
    def test_uniform_spacing(self):
        assert sample_rows(10, 5).tolist() == [0, 2, 4, 6, 8]

    def test_cyclic_repetition(self):
        assert sample_rows(3, 5).tolist() == [0, 1, 2, 0, 1]

    def test_exact_fit(self):
        assert sample_rows(4, 4).tolist() == [0, 1, 2, 3]


def make_dataset(tmp_path, seed=0, **overrides):
    cfg = SimConfig(seed=seed, videos_per_stream=6, test_videos_per_class=4,
                    rows_per_video=12, **overrides)
    out = generate(cfg, tmp_path / f"data{seed}")
    train_m = formats.read_manifest(out.train_manifest, training=True)
    test_m = formats.read_manifest(out.test_manifest)
    masks = formats.read_masks(out.masks_path, test_m)
    return train_m, test_m, masks


def sim_configs(steps=5, **kw):
    prof = get_profile("sim")
    return prof.model, config_with(prof.train, steps=steps, batch_videos_per_stream=2, **kw)


class TestSampleBatch:
    def test_deterministic_given_seed(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        features = load_features(manifest)
        cfg = TrainConfig(steps=1, segment_number=5, seed=3)
        a = sample_batch(manifest, features, cfg, np.random.default_rng(3))
        b = sample_batch(manifest, features, cfg, np.random.default_rng(3))
        for sa, sb in zip(a, b):
            assert len(sa) == len(sb)
            for x, y in zip(sa, sb):
                assert np.array_equal(x, y)

    def test_exactly_segment_number_rows(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        features = load_features(manifest)
        for seg in (5, 12, 20):
            cfg = TrainConfig(steps=1, segment_number=seg)
            rn, pn, pa = sample_batch(manifest, features, cfg, np.random.default_rng(0))
            for stream in (rn, pn, pa):
                assert all(v.shape[0] == seg for v in stream)

    def test_missing_required_stream(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        manifest.entries = [e for e in manifest.entries if e.label != "abnormal"]
        features = load_features(manifest)
        with pytest.raises(ValueError, match="abnormal"):
            sample_batch(manifest, features, TrainConfig(steps=1), np.random.default_rng(0))


class TestAdam:
    def test_zero_learning_rate_is_identity(self):
        cfg = ModelConfig(feature_dim=4, model_dim=8, heads=2, slots_abnormal=2, slots_normal=2)
        params = DetectorParams.init(cfg, 0)
        before = {k: v.copy() for k, v in params.arrays.items()}
        opt = Adam(params, lr=0.0, weight_decay=0.0)
        grads = {k: np.ones_like(v) for k, v in params.arrays.items()}
        for _ in range(3):
            opt.step(grads)
        for k in before:
            assert np.array_equal(params.arrays[k], before[k])

    def test_descends_quadratic(self):
        cfg = ModelConfig(feature_dim=4, model_dim=8, heads=2, slots_abnormal=2, slots_normal=2)
        params = DetectorParams.init(cfg, 0)
        opt = Adam(params, lr=0.05, weight_decay=0.0)
        name = "memory.abnormal"
        for _ in range(200):
            opt.step({name: 2 * params.arrays[name]})
        assert np.max(np.abs(params.arrays[name])) < 1e-2


class TestRankAuc:
    def test_perfect_separation(self):
        assert rank_auc(np.array([0.9, 0.1]), np.array([1, 0])) == 1.0

    def test_all_ties_midrank_half(self):
        assert rank_auc(np.array([0.8, 0.8]), np.array([1, 0])) == 0.5

    def test_hand_case_three_quarters(self):
        assert rank_auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1])) == 0.75

    def test_matches_trapezoid_oracle(self):
        rng = np.random.default_rng(17)
        for trial in range(100):
            n = int(rng.integers(2, 101))
            labels = rng.random(n) < rng.uniform(0.2, 0.8)
            if labels.all() or not labels.any():
                labels[0] = True
                labels[1] = False
            scores = rng.random(n)
            if trial % 3 == 0:  # force ties
                scores = np.round(scores, 1)
            assert abs(rank_auc(scores, labels) - trapezoid_auc(scores, labels)) <= 1e-9

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(23)
        scores = rng.random(60)
        labels = rng.random(60) < 0.4
        labels[0], labels[1] = True, False
        base = rank_auc(scores, labels)
        assert rank_auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert rank_auc(3.5 * scores + 11, labels) == pytest.approx(base, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="positive and one negative"):
            rank_auc(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_frame_auc_requires_masks(self):
        traces = [ScoreTrace("v", np.array([0.1, 0.9]))]
        with pytest.raises(ValueError, match="no mask"):
            frame_auc(traces, {})


class TestTrain:
    def test_bit_deterministic(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        model_cfg, cfg = sim_configs(steps=5)
        r1 = train(manifest, model_cfg, cfg, tmp_path / "run1")
        r2 = train(manifest, model_cfg, cfg, tmp_path / "run2")
        for f in sorted((tmp_path / "run1" / "checkpoint").iterdir()):
            assert f.read_bytes() == (tmp_path / "run2" / "checkpoint" / f.name).read_bytes()
        assert (tmp_path / "run1" / "loss_log.jsonl").read_bytes() == \
               (tmp_path / "run2" / "loss_log.jsonl").read_bytes()

    def test_loss_log_schema(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        model_cfg, cfg = sim_configs(steps=3)
        result = train(manifest, model_cfg, cfg, tmp_path / "run")
        lines = [json.loads(l) for l in result.loss_log.read_text().splitlines()]
        assert len(lines) == 3
        assert set(lines[0]) == {"step", "mil_rank", "mil_cls", "da", "upd", "total"}

    def test_ablation_wiring_banks_move_disc_frozen(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        model_cfg, cfg = sim_configs(steps=1, lambda1=0.0, lambda2=0.0, weight_decay=0.0)
        init = DetectorParams.init(model_cfg, cfg.seed)
        result = train(manifest, model_cfg, cfg)
        for name in ("disc.w1", "disc.b1", "disc.w2", "disc.b2"):
            assert np.array_equal(result.params.arrays[name], init.arrays[name])
        for name in ("memory.abnormal", "memory.normal", "head.weight"):
            assert not np.array_equal(result.params.arrays[name], init.arrays[name])

    def test_zero_learning_rate_checkpoint_equals_init(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        model_cfg, cfg = sim_configs(steps=2, weight_decay=0.0)
        cfg.learning_rate = 0.0  # constructor rejects it; the optimizer contract still holds
        result = train(manifest, model_cfg, cfg, tmp_path / "run")
        init = DetectorParams.init(model_cfg, cfg.seed)
        init.save(tmp_path / "init_ckpt")
        for f in sorted((tmp_path / "run" / "checkpoint").iterdir()):
            assert f.read_bytes() == (tmp_path / "init_ckpt" / f.name).read_bytes()

    def test_divergence_reports_step(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        # a pathological learning rate overflows float64 on the next forward
        model_cfg, cfg = sim_configs(steps=3)
        cfg.learning_rate = 1e80
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as err:
            train(manifest, model_cfg, cfg)
        assert err.value.step == 1

    def test_config_validation(self):
        with pytest.raises(ValueError, match="steps"):
            TrainConfig(steps=0)
        with pytest.raises(ValueError, match="learning_rate"):
            TrainConfig(steps=1, learning_rate=0.0)
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(steps=1, optimizer="sgd")

    def test_smoke_total_loss_declines_on_simulator(self, tmp_path):
        prof = get_profile("sim")
        out = generate(SimConfig(seed=0), tmp_path / "bench")
        manifest = formats.read_manifest(out.train_manifest, training=True)
        result = train(manifest, prof.model, prof.train)
        totals = [b.total for b in result.breakdowns]
        tenth = max(1, len(totals) // 10)
        assert np.median(totals[-tenth:]) < np.median(totals[:tenth])

    def test_random_crop_flag(self, tmp_path):
        manifest, _, _ = make_dataset(tmp_path)
        features = load_features(manifest)
        cfg = TrainConfig(steps=1, segment_number=5, random_crop=True)
        rn, _, _ = sample_batch(manifest, features, cfg, np.random.default_rng(2))
        again, _, _ = sample_batch(manifest, features, cfg, np.random.default_rng(2))
        for a, b in zip(rn, again):
            assert a.shape[0] == 5
            assert np.array_equal(a, b)  # deterministic given the generator state
        uniform, _, _ = sample_batch(manifest, features,
                                     TrainConfig(steps=1, segment_number=5),
                                     np.random.default_rng(2))
        assert any(not np.array_equal(a, b) for a, b in zip(rn, uniform))


class TestEvaluate:
    def test_constant_score_model_gives_half(self, tmp_path):
        manifest, test_m, masks = make_dataset(tmp_path)
        model_cfg, _ = sim_configs()
        params = DetectorParams.init(model_cfg, 0)
        params.arrays["head.weight"] = np.zeros_like(params.arrays["head.weight"])
        params.arrays["head.bias"] = np.zeros(())
        result = evaluate(params, test_m, masks)
        assert result.auc_micro == 0.5

    def test_oracle_scores_give_one(self, tmp_path):
        _, test_m, masks = make_dataset(tmp_path)
        traces = [ScoreTrace(e.video_id, masks[e.video_id].astype(np.float64))
                  for e in test_m.entries]
        assert frame_auc(traces, masks) == 1.0

    def test_outputs_written(self, tmp_path):
        manifest, test_m, masks = make_dataset(tmp_path)
        model_cfg, cfg = sim_configs(steps=2)
        result = train(manifest, model_cfg, cfg)
        ev = evaluate(result.params, test_m, masks, tmp_path / "eval")
        metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
        assert set(metrics) == {"auc_micro", "auc_macro", "n_frames", "n_videos"}
        assert metrics["auc_micro"] == ev.auc_micro
        trace_files = sorted((tmp_path / "eval" / "traces").iterdir())
        assert len(trace_files) == len(test_m.entries)
        doc = json.loads(trace_files[0].read_text())
        assert len(doc["frame_scores"]) == test_m.by_id(doc["video_id"]).total_frames
        assert all(0 < s < 1 for s in doc["frame_scores"])

    def test_does_not_mutate_checkpoint(self, tmp_path):
        manifest, test_m, masks = make_dataset(tmp_path)
        model_cfg, cfg = sim_configs(steps=2)
        result = train(manifest, model_cfg, cfg, tmp_path / "run")
        digest_before = {
            f.name: hashlib.sha256(f.read_bytes()).hexdigest()
            for f in (tmp_path / "run" / "checkpoint").iterdir()
        }
        evaluate(DetectorParams.load(tmp_path / "run" / "checkpoint"), test_m, masks)
        digest_after = {
            f.name: hashlib.sha256(f.read_bytes()).hexdigest()
            for f in (tmp_path / "run" / "checkpoint").iterdir()
        }
        assert digest_before == digest_after
