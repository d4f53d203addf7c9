"""Central finite-difference verification of every analytic gradient.

The suite perturbs each leaf coordinate by +-h (default 1e-5, float64
throughout) and compares the symmetric difference quotient against the
backward pass. Two ops are deliberately out of FD's reach and are verified
by exact contracts instead: the gradient-reversal node (its backward is
minus lambda times the upstream, while its forward is the identity) and the
stop-gradient on assignment centers/usages (the quotient of a frozen-input
loss is what FD must see). The composite check therefore runs with reversal
disabled and the assignment context frozen at the base point; reversal is
additionally FD-checked on discriminator parameters, which sit downstream
of it.

Configurations that land too close to a non-differentiable point (hinge at
zero, top-k ties, relu kinks, clamp saturation) are resampled, since the
subgradient convention makes FD meaningless exactly there.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import (LossWeights, domain_alignment_loss, mil_cls_loss, mil_rank_loss,
                     total_loss, usage_update_loss)
from .model import BoundModel, DetectorParams, ModelConfig, assignments_and_usage
from .training import forward_batch

KINK_MARGIN = 1e-3
DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
REL_FLOOR = 1e-3


def finite_difference(f: Callable[[], float], leaves: dict[str, np.ndarray],
                      h: float = DEFAULT_H) -> dict[str, np.ndarray]:
    """Symmetric-difference gradient of ``f`` w.r.t. every entry of every leaf.

    Leaves are mutated in place and restored; ``f`` must read them afresh on
    each call.
    """
    grads = {}
    for name, arr in leaves.items():
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(arr.shape)
    return grads


def max_rel_error(analytic: dict[str, np.ndarray], fd: dict[str, np.ndarray],
                  floor: float = REL_FLOOR) -> float:
    worst = 0.0
    for name, a in analytic.items():
        b = fd[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def _gap_ok(values: np.ndarray, k: int) -> bool:
    """True when the top-1 and top-k selection boundaries are not near ties."""
    s = np.sort(values)[::-1]
    if s.size >= 2 and s[0] - s[1] < KINK_MARGIN:
        return False
    if 1 <= k < s.size and s[k - 1] - s[k] < KINK_MARGIN:
        return False
    return True


# ---------------------------------------------------------------------------
# per-term checks


def check_mil_rank(rng: np.random.Generator, n_abn: int = 6, n_norm: int = 6) -> float:
    while True:
        abn = rng.uniform(0.05, 0.95, n_abn)
        norm = rng.uniform(0.05, 0.95, n_norm)
        hinge_arg = 1.0 - abn.max() + norm.max()
        if _gap_ok(abn, 1) and _gap_ok(norm, 1) and abs(hinge_arg) > KINK_MARGIN:
            break
    leaves = {"abn": abn, "norm": norm}

    def f() -> float:
        g = ad.Graph()
        return mil_rank_loss(g.leaf(leaves["abn"]), g.leaf(leaves["norm"])).item()

    g = ad.Graph()
    ta, tn = g.leaf(abn), g.leaf(norm)
    g.backward(mil_rank_loss(ta, tn))
    analytic = {"abn": ta.grad if ta.grad is not None else np.zeros_like(abn),
                "norm": tn.grad if tn.grad is not None else np.zeros_like(norm)}
    return max_rel_error(analytic, finite_difference(f, leaves))


def check_mil_cls(rng: np.random.Generator, n: int = 6, k: int = 3) -> float:
    while True:
        scores = rng.uniform(0.05, 0.95, n)
        if _gap_ok(scores, k):
            break
    label = int(rng.integers(0, 2))
    leaves = {"scores": scores}

    def f() -> float:
        g = ad.Graph()
        return mil_cls_loss(g.leaf(leaves["scores"]), label, k).item()

    g = ad.Graph()
    t = g.leaf(scores)
    g.backward(mil_cls_loss(t, label, k))
    return max_rel_error({"scores": t.grad}, finite_difference(f, leaves))


def _disc_arrays(rng: np.random.Generator, d: int) -> dict[str, np.ndarray]:
    d2 = max(1, d // 2)
    return {
        "disc.w1": rng.uniform(-0.5, 0.5, (d2, d)),
        "disc.b1": rng.uniform(-0.1, 0.1, d2),
        "disc.w2": rng.uniform(-0.5, 0.5, (1, d2)),
        "disc.b2": rng.uniform(-0.1, 0.1, ()),
    }


def _bind_disc(g: ad.Graph, arrays: dict[str, np.ndarray]):
    leaves = {k: g.leaf(v) for k, v in arrays.items()}

    def discriminate(x: ad.Tensor) -> ad.Tensor:
        row = ad.reshape(x, (1, x.data.shape[0]))
        h = ad.relu(row @ ad.transpose(leaves["disc.w1"]) + leaves["disc.b1"])
        return ad.reshape(ad.sigmoid(h @ ad.transpose(leaves["disc.w2"]) + leaves["disc.b2"]), ())

    return leaves, discriminate


def _relu_safe(arrays: dict[str, np.ndarray], xs: list[np.ndarray]) -> bool:
    for x in xs:
        pre = arrays["disc.w1"] @ x + arrays["disc.b1"]
        if np.min(np.abs(pre)) < KINK_MARGIN * 0.1:
            return False
    return True


def check_domain_alignment(rng: np.random.Generator, d: int = 8,
                           grl_on_disc_only: bool = False) -> float:
    """FD for the alignment loss.

    Reversal disabled: all leaves (stream means + discriminator). Reversal
    enabled: discriminator parameters only, which reversal cannot affect.
    """
    w = LossWeights(lambda_da=0.2, lambda_dist=0.01)
    while True:
        fn = rng.uniform(-1, 1, d)
        fnt = rng.uniform(-1, 1, d)
        arrays = _disc_arrays(rng, d)
        if _relu_safe(arrays, [fn, fnt]):
            break
    leaves = {"fn": fn, "fnt": fnt, **arrays}
    grl_enabled = grl_on_disc_only

    def f() -> float:
        g = ad.Graph()
        _, disc = _bind_disc(g, arrays)
        return domain_alignment_loss(g.leaf(leaves["fn"]), g.leaf(leaves["fnt"]),
                                     disc, w, grl_enabled=grl_enabled).item()

    g = ad.Graph()
    disc_leaves, disc = _bind_disc(g, arrays)
    tf_n, tf_nt = g.leaf(fn), g.leaf(fnt)
    g.backward(domain_alignment_loss(tf_n, tf_nt, disc, w, grl_enabled=grl_enabled))

    if grl_on_disc_only:
        analytic = {k: v.grad for k, v in disc_leaves.items()}
        fd = finite_difference(f, {k: leaves[k] for k in disc_leaves})
    else:
        analytic = {"fn": tf_n.grad, "fnt": tf_nt.grad,
                    **{k: v.grad for k, v in disc_leaves.items()}}
        fd = finite_difference(f, leaves)
    return max_rel_error(analytic, fd)


def check_usage_update(rng: np.random.Generator, d: int = 8, k_slots: int = 4,
                       n_rows: int = 12) -> float:
    z = rng.uniform(-1, 1, (n_rows, d))
    bank = rng.uniform(-1, 1, (k_slots, d))
    q, _ = assignments_and_usage(z, bank, tau=0.1)
    w = LossWeights(beta=1.0, epsilon=1e-6)
    leaves = {"bank": bank}

    def f() -> float:
        g = ad.Graph()
        return usage_update_loss(q, z, g.leaf(leaves["bank"]), w).item()

    g = ad.Graph()
    t = g.leaf(bank)
    g.backward(usage_update_loss(q, z, t, w))
    return max_rel_error({"bank": t.grad}, finite_difference(f, leaves))


def usage_update_closed_form_gap(rng: np.random.Generator, d: int = 8, k_slots: int = 4,
                                 n_rows: int = 12, beta: float = 1.0) -> float:
    """Max |autodiff - (2/K) (u_bar/(u_k+eps))^beta (m_k - mu_k)| over slots."""
    z = rng.uniform(-1, 1, (n_rows, d))
    bank = rng.uniform(-1, 1, (k_slots, d))
    q, u = assignments_and_usage(z, bank, tau=0.1)
    w = LossWeights(beta=beta, epsilon=1e-6)
    g = ad.Graph()
    t = g.leaf(bank)
    g.backward(usage_update_loss(q, z, t, w))
    centers = (q.T @ z) / q.sum(axis=0)[:, None]
    weights = (u.mean() / (u + w.epsilon)) ** w.beta
    closed = (2.0 / k_slots) * weights[:, None] * (bank - centers)
    return float(np.max(np.abs(t.grad - closed)))


# ---------------------------------------------------------------------------
# composite (full objective) check


def _random_batch(rng: np.random.Generator, n_videos: int, t_rows: int, feat_dim: int,
                  scale: float = 1.0) -> list[np.ndarray]:
    return [rng.standard_normal((t_rows, feat_dim)) * scale for _ in range(n_videos)]


def _composite_safe(batch, w: LossWeights, params: DetectorParams,
                    pooled: list[np.ndarray]) -> bool:
    for s in batch.scores_abn + batch.scores_norm:
        vals = s.data
        k = min(vals.size, w.topk)
        if not (_gap_ok(vals, 1) and _gap_ok(vals, k)):
            return False
        if np.any(vals < 1e-6) or np.any(vals > 1.0 - 1e-6):
            return False
    n = len(batch.scores_norm)
    for i, s_abn in enumerate(batch.scores_abn):
        arg = 1.0 - s_abn.data.max() + batch.scores_norm[i % n].data.max()
        if abs(arg) < KINK_MARGIN:
            return False
    arrays = {k: v for k, v in params.arrays.items() if k.startswith("disc.")}
    return _relu_safe(arrays, pooled)


def check_composite(rng: np.random.Generator, d: int = 8, k_slots: int = 4, t_rows: int = 6,
                    b: int = 2, feat_dim: int = 10) -> float:
    """FD over every model parameter for the full objective.

    Gradient reversal is disabled and the assignment context is frozen at
    the base point; those two pieces carry their own exact contracts.
    """
    w = LossWeights(lambda1=1.0, lambda2=0.1, lambda_da=0.2, lambda_dist=0.01,
                    beta=1.0, epsilon=1e-6, topk=3)
    cfg = ModelConfig(feature_dim=feat_dim, model_dim=d, heads=2,
                      slots_abnormal=k_slots, slots_normal=k_slots, tau=0.1)
    for _ in range(200):
        seed = int(rng.integers(0, 2 ** 31))
        params = DetectorParams.init(cfg, seed)
        data_rng = np.random.default_rng(seed + 1)
        rn = _random_batch(data_rng, b, t_rows, feat_dim)
        pn = _random_batch(data_rng, b, t_rows, feat_dim)
        pa = _random_batch(data_rng, b, t_rows, feat_dim)

        g = ad.Graph()
        bound = BoundModel(params, g)
        batch = forward_batch(bound, rn, pn, pa)
        pooled = [batch.fn_bar.data, batch.fnt_bar.data]
        if _composite_safe(batch, w, params, pooled):
            break
    else:
        raise RuntimeError("no kink-safe composite configuration found")

    frozen_q, frozen_z = batch.q, batch.z

    def run(collect_grads: bool):
        graph = ad.Graph()
        b_model = BoundModel(params, graph)
        fwd = forward_batch(b_model, rn, pn, pa)
        fwd.q, fwd.z = frozen_q, frozen_z
        loss, _ = total_loss(fwd, w, grl_enabled=False)
        if not collect_grads:
            return loss.item()
        graph.backward(loss)
        return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
                for name, leaf in b_model.leaves.items()}

    analytic = run(collect_grads=True)
    fd = finite_difference(lambda: run(collect_grads=False), params.arrays)
    return max_rel_error(analytic, fd)


# ---------------------------------------------------------------------------
# exact contracts


def grl_contract_max_error(lam: float, rng: np.random.Generator, d: int = 8) -> float:
    """|grad(with reversal) - (-lam) * grad(without)| through a shared head; 0 expected."""
    x = rng.uniform(-1, 1, d)
    arrays = _disc_arrays(rng, d)

    def grad_of(use_grl: bool) -> np.ndarray:
        g = ad.Graph()
        _, disc = _bind_disc(g, arrays)
        leaf = g.leaf(x)
        fed = ad.grad_reverse(leaf, lam) if use_grl else leaf
        g.backward(ad.bce(disc(fed), 1.0))
        return leaf.grad if leaf.grad is not None else np.zeros_like(x)

    with_grl = grad_of(True)
    without = grad_of(False)
    return float(np.max(np.abs(with_grl - (-lam) * without)))


# ---------------------------------------------------------------------------
# suite entry point


@dataclass
class GradCheckReport:
    terms: dict[str, float]
    tol: float
    n_configs: int
    runtime_s: float

    @property
    def max_error(self) -> float:
        return max(self.terms.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def to_json(self) -> dict:
        return {"terms": self.terms, "tol": self.tol, "n_configs": self.n_configs,
                "runtime_s": self.runtime_s, "max_error": self.max_error, "passed": self.passed}


def run_gradient_suite(n_configs: int = 20, seed: int = 0, tol: float = DEFAULT_TOL,
                       include_composite: bool = True) -> GradCheckReport:
    """Max relative FD error per loss term over ``n_configs`` random setups."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    terms = {"mil_rank": 0.0, "mil_cls": 0.0, "da": 0.0, "da_disc_grl_on": 0.0,
             "upd": 0.0, "grl_contract": 0.0}
    if include_composite:
        terms["composite"] = 0.0
    for _ in range(n_configs):
        terms["mil_rank"] = max(terms["mil_rank"], check_mil_rank(rng))
        terms["mil_cls"] = max(terms["mil_cls"], check_mil_cls(rng))
        terms["da"] = max(terms["da"], check_domain_alignment(rng))
        terms["da_disc_grl_on"] = max(terms["da_disc_grl_on"],
                                      check_domain_alignment(rng, grl_on_disc_only=True))
        terms["upd"] = max(terms["upd"], check_usage_update(rng))
        for lam in (0.0, 0.1, 0.2):
            terms["grl_contract"] = max(terms["grl_contract"], grl_contract_max_error(lam, rng))
        if include_composite:
            terms["composite"] = max(terms["composite"], check_composite(rng))
    return GradCheckReport(terms=terms, tol=tol, n_configs=n_configs,
                           runtime_s=time.perf_counter() - start)
