import numpy as np
import pytest

from pavad import autodiff as ad
from pavad.gradcheck import (check_domain_alignment, check_mil_cls, check_mil_rank,
                             check_usage_update, grl_contract_max_error,
                             usage_update_closed_form_gap)
from pavad.losses import (LossWeights, domain_alignment_loss, mil_cls_loss, mil_rank_loss,
                          total_loss, usage_update_loss)
from pavad.model import BoundModel, DetectorParams, ModelConfig, assignments_and_usage
from pavad.training import forward_batch

rng = np.random.default_rng(31)


def scores(vals):
    return ad.Graph().leaf(np.array(vals, dtype=np.float64))


def rank(abn, norm):
    g = ad.Graph()
    return mil_rank_loss(g.leaf(np.array(abn, dtype=np.float64)),
                         g.leaf(np.array(norm, dtype=np.float64))).item()


class TestMilRank:
    def test_perfect_separation(self):
        assert rank([1.0, 0.2], [0.0, 0.0]) == 0.0

    def test_equal_maxima(self):
        assert rank([0.7, 0.3], [0.7, 0.1]) == 1.0

    def test_hand_case(self):
        assert rank([0.9, 0.5], [0.2, 0.1]) == pytest.approx(0.3, abs=1e-12)

    def test_only_bag_maxima_matter(self):
        base = rank([0.9, 0.5, 0.1], [0.2, 0.15])
        for _ in range(10):
            abn = [0.9, float(rng.uniform(0, 0.89)), float(rng.uniform(0, 0.89))]
            norm = [0.2, float(rng.uniform(0, 0.19))]
            assert rank(abn, norm) == pytest.approx(base, abs=1e-12)

    def test_empty_bag_rejected(self):
        g = ad.Graph()
        with pytest.raises(ValueError, match="non-empty"):
            mil_rank_loss(g.leaf(np.zeros(0)), g.leaf(np.array([0.1])))

    def test_gradient_vs_fd(self):
        for _ in range(5):
            assert check_mil_rank(rng) <= 1e-4


class TestMilCls:
    def test_perfect_prediction_clamped(self):
        loss = mil_cls_loss(scores([1.0, 1.0, 1.0]), 1, 2).item()
        assert 0 <= loss <= 1.2e-7  # -ln(1 - 1e-7)

    def test_half_confidence_is_ln2(self):
        assert mil_cls_loss(scores([0.5, 0.5]), 1, 1).item() == pytest.approx(
            0.6931471805599453, abs=1e-12)

    def test_k_equals_length_is_mean_bce(self):
        vals = [0.2, 0.6, 0.4]
        mean = np.mean(vals)
        expect = -(np.log(1 - mean))  # label 0
        assert mil_cls_loss(scores(vals), 0, 3).item() == pytest.approx(expect, abs=1e-12)

    def test_gradient_vs_fd(self):
        for _ in range(5):
            assert check_mil_cls(rng) <= 1e-4


def bind_disc(arrays):
    g = ad.Graph()
    leaves = {k: g.leaf(v) for k, v in arrays.items()}

    def disc(x):
        row = ad.reshape(x, (1, x.data.shape[0]))
        h = ad.relu(row @ ad.transpose(leaves["disc.w1"]) + leaves["disc.b1"])
        return ad.reshape(ad.sigmoid(h @ ad.transpose(leaves["disc.w2"]) + leaves["disc.b2"]), ())

    return g, leaves, disc


def zero_disc(d=6):
    d2 = d // 2
    return {"disc.w1": np.zeros((d2, d)), "disc.b1": np.zeros(d2),
            "disc.w2": np.zeros((1, d2)), "disc.b2": np.zeros(())}


class TestDomainAlignment:
    def test_identical_streams_zero_distance(self):
        w = LossWeights(lambda_dist=0.7)
        g, _, disc = bind_disc(zero_disc())
        x = rng.standard_normal(6)
        loss = domain_alignment_loss(g.leaf(x.copy()), g.leaf(x.copy()), disc, w)
        # zero-weight discriminator outputs 0.5 for both streams
        assert loss.item() == pytest.approx(2 * np.log(2), abs=1e-12)

    def test_zero_discriminator_hand_value(self):
        w = LossWeights(lambda_dist=0.01)
        g, _, disc = bind_disc(zero_disc())
        a = rng.standard_normal(6)
        b = rng.standard_normal(6)
        loss = domain_alignment_loss(g.leaf(a), g.leaf(b), disc, w)
        expect = 2 * np.log(2) + 0.01 * float(np.sum((a - b) ** 2))
        assert loss.item() == pytest.approx(expect, abs=1e-12)

    def test_grl_flips_and_scales_feature_gradient(self):
        arrays = {"disc.w1": rng.uniform(-0.5, 0.5, (3, 6)), "disc.b1": rng.uniform(-0.1, 0.1, 3),
                  "disc.w2": rng.uniform(-0.5, 0.5, (1, 3)), "disc.b2": np.array(0.05)}
        a = rng.standard_normal(6)
        b = rng.standard_normal(6)
        w = LossWeights(lambda_da=0.2, lambda_dist=0.0)

        def grads(grl_enabled):
            g, _, disc = bind_disc(arrays)
            ta, tb = g.leaf(a), g.leaf(b)
            g.backward(domain_alignment_loss(ta, tb, disc, w, grl_enabled=grl_enabled))
            return ta.grad, tb.grad

        ga_on, gb_on = grads(True)
        ga_off, gb_off = grads(False)
        assert np.array_equal(ga_on, -0.2 * ga_off)
        assert np.array_equal(gb_on, -0.2 * gb_off)

    def test_gradient_vs_fd(self):
        for _ in range(5):
            assert check_domain_alignment(rng) <= 1e-4
            assert check_domain_alignment(rng, grl_on_disc_only=True) <= 1e-4

    def test_grl_contract_exact(self):
        for lam in (0.0, 0.1, 0.2):
            assert grl_contract_max_error(lam, rng) == 0.0


class TestUsageUpdate:
    def test_zero_when_slots_equal_centers(self):
        z = rng.standard_normal((10, 4))
        q = rng.random((10, 3))
        q /= q.sum(axis=1, keepdims=True)
        centers = (q.T @ z) / q.sum(axis=0)[:, None]
        g = ad.Graph()
        loss = usage_update_loss(q, z, g.leaf(centers), LossWeights())
        assert loss.item() == pytest.approx(0.0, abs=1e-24)

    def test_beta_zero_unweighted_mean(self):
        z = rng.standard_normal((8, 4))
        bank = rng.standard_normal((3, 4))
        q, _ = assignments_and_usage(z, bank, tau=0.1)
        centers = (q.T @ z) / q.sum(axis=0)[:, None]
        expect = float(np.mean(np.sum((bank - centers) ** 2, axis=1)))
        g = ad.Graph()
        loss = usage_update_loss(q, z, g.leaf(bank), LossWeights(beta=0.0))
        assert loss.item() == pytest.approx(expect, rel=1e-12)

    def test_uniform_q_hand_case(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        q = np.full((2, 2), 0.5)
        bank = np.array([[1.0, 1.0], [0.0, 0.0]])
        # both centers are (0.5, 0.5); distances 0.5 each; weights ~1 at eps=1e-6
        g = ad.Graph()
        loss = usage_update_loss(q, z, g.leaf(bank), LossWeights(beta=1.0, epsilon=1e-6))
        assert loss.item() == pytest.approx(0.5, rel=1e-5)

    def test_closed_form_gradient(self):
        for beta in (0.0, 1.0, 2.0):
            for _ in range(5):
                assert usage_update_closed_form_gap(rng, beta=beta) <= 1e-10

    def test_gradient_vs_fd(self):
        for _ in range(5):
            assert check_usage_update(rng) <= 1e-4

    def test_underuse_weight_monotonicity(self):
        # identical rows pin every center to that row, isolating the weights
        z = np.tile(np.array([[1.0, 2.0, 3.0]]), (10, 1))
        bank = np.array([[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]])
        w = LossWeights(beta=1.0, epsilon=1e-6)

        def loss_with_mass(m0):
            q = np.zeros((10, 2))
            k = int(round(m0 * 10))
            q[:k, 0] = 1.0
            q[k:, 1] = 1.0
            g = ad.Graph()
            return usage_update_loss(q, z, g.leaf(bank), w).item()

        losses = [loss_with_mass(m) for m in (0.5, 0.3, 0.2, 0.1)]
        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_shape_validation(self):
        g = ad.Graph()
        with pytest.raises(ValueError):
            usage_update_loss(np.ones((3, 2)), np.ones((4, 2)), g.leaf(np.ones((2, 2))),
                              LossWeights())


class TestLossWeights:
    def test_validation(self):
        with pytest.raises(ValueError, match="epsilon"):
            LossWeights(epsilon=0.0)
        with pytest.raises(ValueError, match=">= 0"):
            LossWeights(lambda1=-0.1)
        with pytest.raises(ValueError, match="topk"):
            LossWeights(topk=0)


def tiny_batch(seed=0, b=2, t=5, feat=6):
    cfg = ModelConfig(feature_dim=feat, model_dim=8, heads=2, slots_abnormal=3,
                      slots_normal=3, tau=0.1)
    params = DetectorParams.init(cfg, seed)
    r = np.random.default_rng(seed)
    g = ad.Graph()
    bound = BoundModel(params, g)
    rn = [r.standard_normal((t, feat)) for _ in range(b)]
    pn = [r.standard_normal((t, feat)) for _ in range(b)]
    pa = [r.standard_normal((t, feat)) for _ in range(b)]
    return g, forward_batch(bound, rn, pn, pa)


class TestTotalLoss:
    def test_ablation_reduces_to_discrimination(self):
        g, batch = tiny_batch()
        w = LossWeights(lambda1=0.0, lambda2=0.0, topk=3)
        total, bd = total_loss(batch, w)
        assert total.item() == pytest.approx(bd.mil_rank + bd.mil_cls, abs=1e-12)

    def test_breakdown_resummation(self):
        for seed in range(5):
            g, batch = tiny_batch(seed)
            w = LossWeights(lambda1=0.8, lambda2=0.3, topk=2)
            total, bd = total_loss(batch, w)
            resum = bd.mil_rank + bd.mil_cls + w.lambda1 * bd.da + w.lambda2 * bd.upd
            assert abs(bd.total - resum) <= 1e-10
            assert total.item() == bd.total

    def test_all_terms_nonnegative_finite(self):
        for seed in range(5):
            _, batch = tiny_batch(seed)
            _, bd = total_loss(batch, LossWeights(topk=2))
            for v in (bd.mil_rank, bd.mil_cls, bd.da, bd.upd, bd.total):
                assert np.isfinite(v) and v >= 0

    def test_missing_pseudo_normal_skips_alignment(self):
        g, batch = tiny_batch()
        batch.fnt_bar = None
        _, bd = total_loss(batch, LossWeights(topk=2))
        assert bd.da_skipped and bd.da == 0.0

    def test_missing_stream_rejected(self):
        g, batch = tiny_batch()
        batch.scores_abn = []
        with pytest.raises(ValueError, match="abnormal"):
            total_loss(batch, LossWeights(topk=2))
