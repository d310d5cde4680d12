"""Prediction heads, training losses and negative-sample assembly."""

from __future__ import annotations

import logging
import math
import random
from collections.abc import Iterable
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .feedlog import FeedbackRecord, FeedbackType, ImpressionLog
from .layers import INIT_STD

log = logging.getLogger(__name__)

DWELL_CAP = 1800.0
NORM_EPS = 1e-8


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.15
    gamma: float = 0.2

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise HeadError("loss weights must be nonnegative")


class Heads(nn.Module):
    """Finish and dwell projections; click score needs no parameters."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.W_z = nn.Parameter(torch.randn(dim, dim) * INIT_STD)
        self.W_t = nn.Parameter(torch.randn(dim, dim) * INIT_STD)

    def forward(self, u: torch.Tensor, e: torch.Tensor):
        return score(u, e, self.W_z, self.W_t)


def score(u: torch.Tensor, e: torch.Tensor, W_z: torch.Tensor, W_t: torch.Tensor):
    """Click, finish and dwell scores of candidate(s) ``e`` for user(s) ``u``.

    ``u`` is ``(..., d)`` and ``e`` is ``(..., d)`` or ``(..., n, d)``.
    """
    d = u.shape[-1]
    if e.shape[-1] != d or W_z.shape != (d, d) or W_t.shape != (d, d):
        raise HeadError(f"dimension mismatch: u {tuple(u.shape)}, e {tuple(e.shape)}, W {tuple(W_z.shape)}")
    if e.dim() > u.dim():
        u = u.unsqueeze(-2)
    y = (u * e).sum(-1)
    z = (u * (e @ W_z.T)).sum(-1)
    t = torch.relu((u * (e @ W_t.T)).sum(-1))
    return y, z, t


def normalize_dwell(t: float, t_max: float = DWELL_CAP) -> float:
    if t < 0 or t_max <= 0:
        raise HeadError("need t >= 0 and t_max > 0")
    return math.log2(min(t, t_max) + 1) / math.log2(t_max + 1)


def loss_click(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy of the clicked item against its K negatives.

    ``pos`` is ``(...)`` and ``neg`` is ``(..., K)``; returns per-sample loss.
    """
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - pos


def loss_finish(z_pos: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(z_pos, label.to(z_pos.dtype), reduction="none")


def loss_dwell(t_pos: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return (label.to(t_pos.dtype) - t_pos).abs()


def loss_disentangle(w_pos: torch.Tensor, w_neg: torch.Tensor) -> torch.Tensor:
    """Cosine similarity; 0 where either vector is (near) zero."""
    n_pos = w_pos.norm(dim=-1)
    n_neg = w_neg.norm(dim=-1)
    ok = (n_pos >= NORM_EPS) & (n_neg >= NORM_EPS)
    denom = torch.where(ok, n_pos * n_neg, torch.ones_like(n_pos))
    cos = (w_pos * w_neg).sum(-1) / denom
    return torch.where(ok, cos, torch.zeros_like(cos))


def loss_total(l_click, l_finish, l_dwell, l_disentangle, weights: LossWeights = LossWeights()):
    return l_click + weights.alpha * l_finish + weights.beta * l_dwell + weights.gamma * l_disentangle


@dataclass(frozen=True)
class TrainingSample:
    """One clicked item and K skipped items from the same impression.

    The user state is every feedback the user gave strictly before
    ``timestamp``; it is resolved from the per-user sequence at batch time.
    """

    user_id: str
    impression_id: str
    timestamp: int
    positive: str
    negatives: tuple[str, ...]
    finished: int
    dwell: float


def build_samples(
    impressions: Iterable[ImpressionLog],
    feedback: Iterable[FeedbackRecord],
    K: int = 4,
    seed: int = 0,
    t_max: float = DWELL_CAP,
) -> tuple[list[TrainingSample], int]:
    """One sample per click. Returns the samples and the count of dropped impressions.

    Negatives are drawn without replacement when the impression has at least
    ``K`` skips and with replacement otherwise. An impression with clicks but
    no skips contributes nothing and is counted.
    """
    if K < 1:
        raise HeadError("K must be at least 1")
    dwell: dict[tuple[str, str, int], int] = {}
    finished: set[tuple[str, str, int]] = set()
    for r in feedback:
        key = (r.user_id, r.news_id, r.event_time)
        if r.type is FeedbackType.CLICK:
            dwell[key] = r.dwell_time
        elif r.type is FeedbackType.FINISH:
            finished.add(key)
    samples: list[TrainingSample] = []
    dropped = 0
    for imp in impressions:
        if not imp.clicked:
            continue
        skips = list(imp.skipped)
        if not skips:
            dropped += 1
            continue
        rng = random.Random(f"{seed}:{imp.impression_id}")
        for pos in imp.clicked:
            key = (imp.user_id, pos, imp.timestamp)
            if key not in dwell:
                raise HeadError(f"click on {pos} in impression {imp.impression_id} has no dwell_time")
            if len(skips) >= K:
                negs = rng.sample(skips, K)
            else:
                negs = rng.choices(skips, k=K)
            samples.append(
                TrainingSample(
                    imp.user_id,
                    imp.impression_id,
                    imp.timestamp,
                    pos,
                    tuple(negs),
                    int(key in finished),
                    normalize_dwell(dwell[key], t_max),
                )
            )
    if dropped:
        log.warning("dropped %d impression(s) with no skipped news", dropped)
    return samples, dropped
