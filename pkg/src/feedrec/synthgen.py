"""Synthetic multi-feedback news-feed logs.

Users and news live in a shared latent topic space. A user clicks a shown item
with probability ``sigmoid(click_bias + affinity_scale * affinity + appeal)``;
a minority of items are click-bait with high appeal but mostly short reads.
Dwell time is drawn from a two-component mixture in log-seconds whose fast
component dominates for low-affinity and click-bait clicks. Finishing, sharing
and disliking all depend on affinity, so strong feedback carries cleaner
interest signal than raw clicks do.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, fields

import numpy as np

from .feedlog import (
    Corpus,
    FeedbackRecord,
    FeedbackType,
    GROUP_ORDER,
    ImpressionLog,
    NewsArticle,
    RawImpression,
    logged_records,
)

START_TIME = 1598918400  # 2020-09-01T00:00:00Z
PAD_TOKEN = 0


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 1000
    n_news: int = 2000
    n_impressions: int = 12000
    topic_count: int = 16
    user_interest_dim: int = 16
    vocab_size: int = 100
    title_length: tuple[int, int] = (4, 10)
    shown_per_impression: tuple[int, int] = (6, 14)
    days: int = 32
    # (weight_fast, mean_fast, sd_fast, weight_slow, mean_slow, sd_slow), log-seconds
    dwell_mixture: tuple[float, ...] = (0.2, math.log(4.0), 0.5, 0.8, math.log(90.0), 0.8)
    # per-user activity, drives impression and hence skip counts
    skip_count_lognormal: tuple[float, float] = (0.0, 1.1)
    share_prob: float = 0.006
    dislike_prob: float = 0.035
    clickbait_fraction: float = 0.1
    click_bias: float = -2.5
    affinity_scale: float = 4.0
    finish_min_dwell: int = 10
    # how strongly post-click behaviour tracks standardized affinity
    dwell_coupling: float = 3.0
    finish_coupling: float = 2.5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "title_length", tuple(self.title_length))
        object.__setattr__(self, "shown_per_impression", tuple(self.shown_per_impression))
        object.__setattr__(self, "dwell_mixture", tuple(float(x) for x in self.dwell_mixture))
        object.__setattr__(self, "skip_count_lognormal", tuple(float(x) for x in self.skip_count_lognormal))
        self.validate()

    def validate(self) -> None:
        if self.n_users <= 0 or self.n_news <= 0:
            raise GeneratorConfigError("n_users and n_news must be positive")
        if self.n_impressions < self.n_users:
            raise GeneratorConfigError("need at least one impression per user")
        if self.topic_count <= 0 or self.user_interest_dim <= 0:
            raise GeneratorConfigError("topic_count and user_interest_dim must be positive")
        lo, hi = self.shown_per_impression
        if not 2 <= lo <= hi <= self.n_news:
            raise GeneratorConfigError("shown_per_impression must satisfy 2 <= lo <= hi <= n_news")
        tlo, thi = self.title_length
        if not 1 <= tlo <= thi:
            raise GeneratorConfigError("title_length must satisfy 1 <= lo <= hi")
        if self.vocab_size < 4 * (self.topic_count + 2):
            raise GeneratorConfigError("vocab_size too small for the topic token bands")
        if len(self.dwell_mixture) != 6:
            raise GeneratorConfigError("dwell_mixture needs six numbers")
        w_fast, _, sd_fast, w_slow, _, sd_slow = self.dwell_mixture
        if not (0 <= w_fast <= 1 and 0 <= w_slow <= 1 and math.isclose(w_fast + w_slow, 1.0, abs_tol=1e-9)):
            raise GeneratorConfigError("dwell mixture weights must be probabilities summing to 1")
        if sd_fast <= 0 or sd_slow <= 0 or self.skip_count_lognormal[1] <= 0:
            raise GeneratorConfigError("standard deviations must be positive")
        for name in ("share_prob", "dislike_prob", "clickbait_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise GeneratorConfigError(f"{name} must be in [0, 1]")
        if self.days <= 0 or self.finish_min_dwell < 0:
            raise GeneratorConfigError("days must be positive and finish_min_dwell nonnegative")

    @classmethod
    def from_dict(cls, data: Mapping) -> GeneratorConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise GeneratorConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _title(rng: np.random.Generator, cfg: GeneratorConfig, topic: int, bait: bool) -> tuple[int, ...]:
    # token 0 is padding; bands: generic | one per topic | click-bait
    band = (cfg.vocab_size - 1) // (cfg.topic_count + 2)
    generic = (1, 1 + band)
    topical = (1 + band * (1 + topic), 1 + band * (2 + topic))
    bait_band = (1 + band * (1 + cfg.topic_count), 1 + band * (2 + cfg.topic_count))
    length = int(rng.integers(cfg.title_length[0], cfg.title_length[1] + 1))
    src = rng.random(length)
    tokens = np.where(
        src < 0.65,
        rng.integers(*topical, size=length),
        rng.integers(*generic, size=length),
    )
    if bait:
        k = min(length, 2)
        tokens[rng.choice(length, size=k, replace=False)] = rng.integers(*bait_band, size=k)
    return tuple(int(t) for t in tokens)


def generate_corpus(config: GeneratorConfig) -> Corpus:
    """Draw a full corpus. Identical configs give identical corpora."""
    return _generate(config)[0]


def click_affinities(config: GeneratorConfig) -> dict[tuple[str, str, int], float]:
    """Latent user-item affinity behind every generated click, keyed like the click record."""
    return _generate(config)[1]


def _generate(config: GeneratorConfig) -> tuple[Corpus, dict]:
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.user_interest_dim

    topic_vecs = rng.normal(size=(cfg.topic_count, dim)) / math.sqrt(dim)
    topic_vecs /= np.linalg.norm(topic_vecs, axis=1, keepdims=True)

    news_topic = rng.integers(0, cfg.topic_count, size=cfg.n_news)
    news_vec = topic_vecs[news_topic] + 0.3 * rng.normal(size=(cfg.n_news, dim)) / math.sqrt(dim)
    news_bait = rng.random(cfg.n_news) < cfg.clickbait_fraction
    news_appeal = 0.3 * rng.normal(size=cfg.n_news) + 1.0 * news_bait
    catalog = [
        NewsArticle(f"N{i}", _title(rng, cfg, int(news_topic[i]), bool(news_bait[i])), int(news_topic[i]))
        for i in range(cfg.n_news)
    ]

    n_interests = np.minimum(1 + rng.poisson(1.0, size=cfg.n_users), cfg.topic_count)
    user_vec = np.zeros((cfg.n_users, dim))
    for u in range(cfg.n_users):
        chosen = rng.choice(cfg.topic_count, size=n_interests[u], replace=False)
        weights = rng.dirichlet(np.ones(n_interests[u])) * 0.5 + 0.5 / n_interests[u]
        user_vec[u] = weights @ topic_vecs[chosen] + 0.2 * rng.normal(size=dim) / math.sqrt(dim)

    mu, sigma = cfg.skip_count_lognormal
    activity = rng.lognormal(mu, sigma, size=cfg.n_users)
    per_user = 1 + rng.multinomial(cfg.n_impressions - cfg.n_users, activity / activity.sum())

    w_fast, m_fast, s_fast, _, m_slow, s_slow = cfg.dwell_mixture
    fast_logit0 = math.log(max(w_fast, 1e-9) / max(1 - w_fast, 1e-9))
    span = cfg.days * 86400

    events = []  # (user, timestamp, shown idx array, clicked mask)
    for u in range(cfg.n_users):
        times = np.sort(rng.integers(START_TIME, START_TIME + span, size=per_user[u]))
        for ts in times:
            size = int(rng.integers(cfg.shown_per_impression[0], cfg.shown_per_impression[1] + 1))
            shown = rng.choice(cfg.n_news, size=size, replace=False)
            aff = news_vec[shown] @ user_vec[u]
            p = _sigmoid(cfg.click_bias + cfg.affinity_scale * aff + news_appeal[shown])
            clicked = rng.random(size) < p
            events.append((u, int(ts), shown, clicked, aff))

    # affinity of clicked items, standardized over all clicks
    click_aff = np.concatenate([e[4][e[3]] for e in events]) if events else np.zeros(0)
    a_mean = float(click_aff.mean()) if click_aff.size else 0.0
    a_std = float(click_aff.std()) if click_aff.size > 1 and click_aff.std() > 0 else 1.0
    skew = 1.5

    affinity: dict[tuple[str, str, int], float] = {}
    raws: list[RawImpression] = []
    explicit: list[FeedbackRecord] = []
    for idx, (u, ts, shown, clicked, aff) in enumerate(events):
        user_id = f"U{u}"
        imp = ImpressionLog(
            f"I{idx}", user_id, tuple(f"N{n}" for n in shown), tuple(f"N{n}" for n in shown[clicked]), ts
        )
        dwell: dict[str, int] = {}
        finished: set[str] = set()
        for n, a in zip(shown[clicked], aff[clicked]):
            z = (a - a_mean) / a_std
            bait = bool(news_bait[n])
            p_fast = _sigmoid(fast_logit0 - cfg.dwell_coupling * z + (1.5 if bait else 0.0))
            if rng.random() < p_fast:
                log_t = rng.normal(m_fast, s_fast)
            else:
                log_t = rng.normal(m_slow, s_slow)
            t = int(min(round(math.exp(log_t)), 6 * 3600))
            nid = f"N{n}"
            dwell[nid] = t
            affinity[(user_id, nid, ts)] = float(a)
            if t >= cfg.finish_min_dwell:
                p_fin = _sigmoid(0.6 + cfg.finish_coupling * z + 0.8 * (math.log(t) - m_slow) - (1.5 if bait else 0.0))
                if rng.random() < p_fin:
                    finished.add(nid)
            after = ts + t
            if rng.random() < min(1.0, cfg.share_prob * math.exp(skew * z - skew * skew / 2)):
                explicit.append(FeedbackRecord(user_id, nid, FeedbackType.SHARE, after))
            if rng.random() < min(1.0, cfg.dislike_prob * math.exp(-skew * z - skew * skew / 2)):
                explicit.append(FeedbackRecord(user_id, nid, FeedbackType.DISLIKE, after))
        raws.append(RawImpression(imp, dwell, frozenset(finished)))

    # canonical order: by time then id, so output bytes never depend on loop order
    raws.sort(key=lambda r: (r.impression.timestamp, r.impression.user_id, r.impression.impression_id))
    impressions = [r.impression for r in raws]
    return Corpus(catalog, impressions, logged_records(raws, explicit)), affinity


def corpus_stats(records: Iterable[FeedbackRecord]) -> dict:
    """Per-type counts, mean click dwell and per-user count distributions."""
    records = list(records)
    if not records:
        raise ValueError("corpus_stats needs a non-empty corpus")
    counts = Counter(r.type for r in records)
    dwells = [r.dwell_time for r in records if r.type is FeedbackType.CLICK]
    users = sorted({r.user_id for r in records})
    per_user: dict[str, dict[str, int]] = {t.value: dict.fromkeys(users, 0) for t in GROUP_ORDER}
    for r in records:
        per_user[r.type.value][r.user_id] += 1
    per_user_summary = {}
    for t, by_user in per_user.items():
        vals = np.array(list(by_user.values()), dtype=float)
        hist = Counter(int(v) for v in vals)
        per_user_summary[t] = {
            "median": float(np.median(vals)),
            "p90": float(np.percentile(vals, 90)),
            "max": int(vals.max()),
            "histogram": {str(k): hist[k] for k in sorted(hist)},
        }
    return {
        "n_users": len(users),
        "n_news": len({r.news_id for r in records}),
        "counts": {t.value: counts.get(t, 0) for t in GROUP_ORDER},
        "mean_dwell": float(np.mean(dwells)) if dwells else None,
        "per_user": per_user_summary,
    }
