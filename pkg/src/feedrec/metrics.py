"""Click-ranking and engagement metrics over scored impressions.

All ranking metrics are computed per impression and macro-averaged. Ties in
score count half in AUC; for top-k ranking they keep the candidate input order.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

TOP_K = 5


@dataclass
class RankedImpression:
    impression_id: str
    scores: np.ndarray
    clicked: np.ndarray
    shared: np.ndarray | None = None
    disliked: np.ndarray | None = None
    finished: np.ndarray | None = None
    dwell: np.ndarray | None = None  # seconds; NaN where not clicked

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=float)
        self.clicked = np.asarray(self.clicked, dtype=bool)
        n = len(self.scores)
        if n < 2:
            raise ValueError(f"impression {self.impression_id} needs at least two candidates")
        for name in ("clicked", "shared", "disliked", "finished", "dwell"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float if name == "dwell" else bool)
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries for {n} candidates")
            setattr(self, name, arr)

    @classmethod
    def from_labels(cls, impression_id, scores, clicked, **labels) -> RankedImpression:
        return cls(impression_id, np.asarray(scores), np.asarray(clicked), **labels)

    def order(self) -> np.ndarray:
        """Candidate indices best-first; ties keep input order."""
        return np.argsort(-self.scores, kind="stable")

    def top(self, k: int = TOP_K) -> np.ndarray:
        return self.order()[:k]


@dataclass
class ClickMetrics:
    auc: float | None
    mrr: float | None
    ndcg5: float | None
    hr5: float | None
    n_impressions: int = 0
    auc_excluded: int = 0
    rank_excluded: int = 0

    def as_tuple(self) -> tuple:
        return (self.auc, self.mrr, self.ndcg5, self.hr5)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "mrr": self.mrr,
            "ndcg@5": self.ndcg5,
            "hr@5": self.hr5,
            "n_impressions": self.n_impressions,
            "auc_excluded": self.auc_excluded,
            "rank_excluded": self.rank_excluded,
        }


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def click_metrics(impressions: Sequence[RankedImpression], k: int = TOP_K) -> ClickMetrics:
    aucs, mrrs, ndcgs, hrs = [], [], [], []
    auc_excluded = rank_excluded = 0
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    for imp in impressions:
        y = imp.clicked
        n_pos = int(y.sum())
        n_neg = len(y) - n_pos
        if n_pos and n_neg:
            ranks = rankdata(imp.scores)  # average ranks, ascending
            aucs.append((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
        else:
            auc_excluded += 1
        if not n_pos:
            rank_excluded += 1
            continue
        ranked_labels = y[imp.order()]
        positions = np.flatnonzero(ranked_labels) + 1
        mrrs.append(float(np.mean(1.0 / positions)))
        dcg = float((ranked_labels[:k] * discounts[: min(k, len(y))]).sum())
        idcg = float(discounts[: min(n_pos, k)].sum())
        ndcgs.append(dcg / idcg)
        hrs.append(float(ranked_labels[:k].any()))
    return ClickMetrics(
        _mean(aucs), _mean(mrrs), _mean(ndcgs), _mean(hrs), len(impressions), auc_excluded, rank_excluded
    )


def oracle_metrics(impressions: Sequence[RankedImpression], k: int = TOP_K) -> ClickMetrics:
    """Brute-force twin of :func:`click_metrics`: pair counting and a full sort."""
    aucs, mrrs, ndcgs, hrs = [], [], [], []
    auc_excluded = rank_excluded = 0
    for imp in impressions:
        scores = [float(s) for s in imp.scores]
        labels = [bool(c) for c in imp.clicked]
        pos = [s for s, c in zip(scores, labels) if c]
        neg = [s for s, c in zip(scores, labels) if not c]
        if pos and neg:
            wins = 0.0
            for p in pos:
                for q in neg:
                    wins += 1.0 if p > q else 0.5 if p == q else 0.0
            aucs.append(wins / (len(pos) * len(neg)))
        else:
            auc_excluded += 1
        if not pos:
            rank_excluded += 1
            continue
        ranking = sorted(range(len(scores)), key=lambda i: -scores[i])
        rr = []
        dcg = 0.0
        hit = 0.0
        for rank, i in enumerate(ranking, start=1):
            if labels[i]:
                rr.append(1.0 / rank)
                if rank <= k:
                    dcg += 1.0 / math.log2(rank + 1)
                    hit = 1.0
        idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(pos), k) + 1))
        mrrs.append(sum(rr) / len(rr))
        ndcgs.append(dcg / idcg)
        hrs.append(hit)
    return ClickMetrics(
        _mean(aucs), _mean(mrrs), _mean(ndcgs), _mean(hrs), len(impressions), auc_excluded, rank_excluded
    )


@dataclass(frozen=True)
class CorpusTotals:
    """Share and dislike counts per shown item, the denominators of the ratios."""

    n_shown: int
    n_shared: int
    n_disliked: int

    @classmethod
    def from_impressions(cls, impressions: Sequence[RankedImpression]) -> CorpusTotals:
        return cls(
            sum(len(i.scores) for i in impressions),
            int(sum(i.shared.sum() for i in impressions if i.shared is not None)),
            int(sum(i.disliked.sum() for i in impressions if i.disliked is not None)),
        )

    @property
    def share_rate(self) -> float | None:
        return self.n_shared / self.n_shown if self.n_shown and self.n_shared else None

    @property
    def dislike_rate(self) -> float | None:
        return self.n_disliked / self.n_shown if self.n_shown and self.n_disliked else None


@dataclass
class EngagementMetrics:
    share_ratio: float | None
    dislike_ratio: float | None
    finish_rate: float | None
    mean_dwell: float | None

    def as_tuple(self) -> tuple:
        return (self.share_ratio, self.dislike_ratio, self.finish_rate, self.mean_dwell)

    def to_dict(self) -> dict:
        return {
            "share_ratio": self.share_ratio,
            "dislike_ratio": self.dislike_ratio,
            "finish_rate": self.finish_rate,
            "mean_dwell": self.mean_dwell,
        }


def engagement_metrics(
    impressions: Sequence[RankedImpression], totals: CorpusTotals | None = None, k: int = TOP_K
) -> EngagementMetrics:
    """Engagement of each impression's top-k, pooled over impressions.

    Share and dislike ratios divide the top-k frequency by the overall
    per-shown-item frequency. Finish rate and mean dwell are over top-k items
    that were clicked. Undefined quantities come back as ``None``.
    """
    totals = totals or CorpusTotals.from_impressions(impressions)
    n_top = shared = disliked = 0
    n_clicked = finished = 0
    dwell_sum = 0.0
    for imp in impressions:
        top = imp.top(k)
        n_top += len(top)
        if imp.shared is not None:
            shared += int(imp.shared[top].sum())
        if imp.disliked is not None:
            disliked += int(imp.disliked[top].sum())
        clicked_top = top[imp.clicked[top]]
        n_clicked += len(clicked_top)
        if imp.finished is not None:
            finished += int(imp.finished[clicked_top].sum())
        if imp.dwell is not None:
            dwell_sum += float(np.nansum(imp.dwell[clicked_top]))

    def ratio(count: int, base: float | None) -> float | None:
        if base is None or not n_top:
            return None
        return (count / n_top) / base

    return EngagementMetrics(
        share_ratio=ratio(shared, totals.share_rate),
        dislike_ratio=ratio(disliked, totals.dislike_rate),
        finish_rate=finished / n_clicked if n_clicked else None,
        mean_dwell=dwell_sum / n_clicked if n_clicked else None,
    )
