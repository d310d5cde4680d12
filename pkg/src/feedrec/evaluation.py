"""Scoring a split and turning scores into metric tables."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .feedlog import Corpus, FeedbackType, ImpressionLog
from .metrics import (
    ClickMetrics,
    CorpusTotals,
    EngagementMetrics,
    RankedImpression,
    click_metrics,
    engagement_metrics,
)
from .model import FeedData, FeedRec
from .trainer import score_impressions


@dataclass
class Evaluation:
    click: ClickMetrics
    engagement: EngagementMetrics
    ranked: list[RankedImpression]
    scores: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    impressions: list[ImpressionLog]

    def summary(self) -> dict:
        return {**self.click.to_dict(), **self.engagement.to_dict()}

    def score_rows(self) -> list[dict]:
        rows = []
        for imp, (y, z, t) in zip(self.impressions, self.scores):
            rows.append(
                {
                    "impression_id": imp.impression_id,
                    "user_id": imp.user_id,
                    "news": list(imp.shown_news),
                    "click_score": [round(float(v), 6) for v in y],
                    "finish_score": [round(float(v), 6) for v in z],
                    "dwell_score": [round(float(v), 6) for v in t],
                    "clicked": [n in set(imp.clicked) for n in imp.shown_news],
                }
            )
        return rows


def label_impressions(
    corpus: Corpus, impressions: Sequence[ImpressionLog], scores: Sequence[np.ndarray]
) -> list[RankedImpression]:
    """Attach click, share, dislike, finish and dwell labels to scored impressions."""
    dwell: dict[tuple[str, str, int], int] = {}
    finished: set[tuple[str, str, int]] = set()
    shared: set[tuple[str, str]] = set()
    disliked: set[tuple[str, str]] = set()
    for r in corpus.records:
        if r.type is FeedbackType.CLICK:
            dwell[(r.user_id, r.news_id, r.event_time)] = r.dwell_time
        elif r.type is FeedbackType.FINISH:
            finished.add((r.user_id, r.news_id, r.event_time))
        elif r.type is FeedbackType.SHARE:
            shared.add((r.user_id, r.news_id))
        elif r.type is FeedbackType.DISLIKE:
            disliked.add((r.user_id, r.news_id))
    out = []
    for imp, y in zip(impressions, scores):
        if len(imp.shown_news) < 2:
            continue
        clicked = set(imp.clicked)
        u, ts = imp.user_id, imp.timestamp
        out.append(
            RankedImpression(
                imp.impression_id,
                y,
                [n in clicked for n in imp.shown_news],
                shared=[n in clicked and (u, n) in shared for n in imp.shown_news],
                disliked=[n in clicked and (u, n) in disliked for n in imp.shown_news],
                finished=[(u, n, ts) in finished for n in imp.shown_news],
                dwell=[dwell.get((u, n, ts), np.nan) if n in clicked else np.nan for n in imp.shown_news],
            )
        )
    return out


def evaluate_split(
    model: FeedRec, data: FeedData, corpus: Corpus, impressions: Sequence[ImpressionLog], batch_size: int = 64
) -> Evaluation:
    impressions = list(impressions)
    scores = score_impressions(model, data, impressions, batch_size)
    ranked = label_impressions(corpus, impressions, [s[0] for s in scores])
    totals = CorpusTotals.from_impressions(ranked)
    return Evaluation(click_metrics(ranked), engagement_metrics(ranked, totals), ranked, scores, impressions)
