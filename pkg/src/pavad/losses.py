"""Training objectives: MIL discrimination, domain alignment, usage-aware update.

The discrimination part pairs a ranking hinge on bag maxima with a top-k BCE
that gives scores absolute calibration. Domain alignment puts a reversed-
gradient discriminator plus an explicit squared-distance term on the pooled
real-normal / pseudo-normal stream means. The usage-aware term pulls each
abnormal slot toward its responsibility-weighted center, weighted by
(mean_usage / (usage + eps))^beta so underused slots are pulled harder; the
centers and usages are constants of the step (stop-gradient), so the slot
gradient has the closed form (2/K) * weight_k * (slot_k - center_k).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

BREAKDOWN_TOL = 1e-10


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda_da: float = 0.2
    lambda_dist: float = 0.01
    beta: float = 1.0
    epsilon: float = 1e-6
    topk: int = 5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda_da", "lambda_dist", "beta", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.topk < 1:
            raise ValueError("topk must be a positive integer")


@dataclass
class LossBreakdown:
    mil_rank: float
    mil_cls: float
    da: float
    upd: float
    total: float
    da_skipped: bool = False

    def to_json(self) -> dict:
        return {
            "mil_rank": self.mil_rank,
            "mil_cls": self.mil_cls,
            "da": self.da,
            "upd": self.upd,
            "total": self.total,
        }


def mil_rank_loss(scores_abn: ad.Tensor, scores_norm: ad.Tensor) -> ad.Tensor:
    """Ranking hinge on bag maxima: max(0, 1 - max(abn) + max(norm))."""
    if scores_abn.data.size == 0 or scores_norm.data.size == 0:
        raise ValueError("ranking loss needs non-empty bags")
    max_abn = ad.topk_mean(scores_abn, 1)
    max_norm = ad.topk_mean(scores_norm, 1)
    return ad.hinge(1.0 - max_abn + max_norm)


def mil_cls_loss(scores: ad.Tensor, label: int, k: int) -> ad.Tensor:
    """BCE between the top-k mean score of one bag and its video-level label."""
    return ad.bce(ad.topk_mean(scores, k), float(label))


def domain_alignment_loss(
    fn_bar: ad.Tensor,
    fnt_bar: ad.Tensor,
    discriminate: Callable[[ad.Tensor], ad.Tensor],
    w: LossWeights,
    grl_enabled: bool = True,
) -> ad.Tensor:
    """Adversarial real/pseudo normal alignment on pooled stream means.

    BCE(D(G(fn_bar)), 0) + BCE(D(G(fnt_bar)), 1) + lambda_dist * ||fn - fnt||^2
    where G reverses gradients with strength lambda_da. ``grl_enabled=False``
    swaps G for the identity; the finite-difference harness uses that, since
    G's backward is by definition not the derivative of its forward.
    """
    def maybe_reverse(x: ad.Tensor) -> ad.Tensor:
        return ad.grad_reverse(x, w.lambda_da) if grl_enabled else x

    loss = ad.bce(discriminate(maybe_reverse(fn_bar)), 0.0)
    loss = loss + ad.bce(discriminate(maybe_reverse(fnt_bar)), 1.0)
    return loss + ad.scalar_mul(ad.squared_l2_norm(fn_bar - fnt_bar), w.lambda_dist)


def usage_update_loss(q: np.ndarray, z: np.ndarray, bank: ad.Tensor, w: LossWeights) -> ad.Tensor:
    """Pull slots toward responsibility-weighted centers, underused ones harder.

    ``q`` and ``z`` enter as plain arrays: centers mu_k = sum_n q_nk z_n /
    sum_n q_nk and usages u are constants with respect to the gradient, so
    only the bank receives one. A responsibility column that underflows to
    exactly zero mass gets its own slot as center (zero pull).
    """
    if q.ndim != 2 or z.ndim != 2 or q.shape[0] != z.shape[0]:
        raise ValueError(f"q {q.shape} and z {z.shape} disagree on rows")
    k_slots, d = bank.data.shape
    if q.shape[1] != k_slots or z.shape[1] != d:
        raise ValueError(f"q {q.shape} / z {z.shape} do not match bank {bank.data.shape}")
    mass = q.sum(axis=0)
    centers = np.where(mass[:, None] > 0, (q.T @ z) / np.where(mass[:, None] > 0, mass[:, None], 1.0),
                       bank.data)
    u = q.mean(axis=0)
    u_bar = u.mean()
    weights = (u_bar / (u + w.epsilon)) ** w.beta
    g = bank.graph
    diff = bank + g.constant(-centers)
    weighted = ad.mul(ad.mul(diff, diff), g.constant(weights[:, None]))
    return ad.scalar_mul(ad.tsum(weighted), 1.0 / k_slots)


@dataclass
class BatchForward:
    """Everything one optimization step's losses consume.

    ``scores_abn`` / ``scores_norm`` hold per-video segment-score tensors
    (pseudo-abnormal and real-normal bags). ``fn_bar`` / ``fnt_bar`` are the
    pooled stream means; ``fnt_bar`` is None when the batch has no
    pseudo-normal videos, in which case the alignment term is skipped and
    flagged. ``q``/``z`` are the detached assignment inputs for the usage
    term, computed from the same forward.
    """

    scores_abn: list[ad.Tensor]
    scores_norm: list[ad.Tensor]
    fn_bar: ad.Tensor | None
    fnt_bar: ad.Tensor | None
    q: np.ndarray
    z: np.ndarray
    bank_abn: ad.Tensor
    discriminate: Callable[[ad.Tensor], ad.Tensor]


def total_loss(out: BatchForward, w: LossWeights, grl_enabled: bool = True) -> tuple[ad.Tensor, LossBreakdown]:
    """Combined objective: (rank + top-k BCE) + lambda1 * DA + lambda2 * update."""
    if not out.scores_abn or not out.scores_norm:
        raise ValueError("batch must contain at least one abnormal and one normal video")
    n_norm = len(out.scores_norm)

    rank = None
    for i, s_abn in enumerate(out.scores_abn):
        term = mil_rank_loss(s_abn, out.scores_norm[i % n_norm])
        rank = term if rank is None else rank + term
    rank = ad.scalar_mul(rank, 1.0 / len(out.scores_abn))

    cls = None
    n_cls = 0
    for s, label in [(s, 1) for s in out.scores_abn] + [(s, 0) for s in out.scores_norm]:
        k = min(s.data.shape[0], w.topk)
        term = mil_cls_loss(s, label, k)
        cls = term if cls is None else cls + term
        n_cls += 1
    cls = ad.scalar_mul(cls, 1.0 / n_cls)

    da_skipped = out.fnt_bar is None or out.fn_bar is None
    if da_skipped:
        da = out.bank_abn.graph.constant(0.0)
    else:
        da = domain_alignment_loss(out.fn_bar, out.fnt_bar, out.discriminate, w, grl_enabled)

    upd = usage_update_loss(out.q, out.z, out.bank_abn, w)

    total = rank + cls + ad.scalar_mul(da, w.lambda1) + ad.scalar_mul(upd, w.lambda2)
    breakdown = LossBreakdown(
        mil_rank=rank.item(),
        mil_cls=cls.item(),
        da=da.item(),
        upd=upd.item(),
        total=total.item(),
        da_skipped=da_skipped,
    )
    return total, breakdown
