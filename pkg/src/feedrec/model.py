"""The full recommender and the tensors it consumes."""

from __future__ import annotations

import bisect
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .feedlog import (
    Corpus,
    FeedbackRecord,
    FeedbackType,
    TYPE_INDEX,
    group_by_user,
    quantize_times,
    subsample_skips,
)
from .heads import Heads
from .news_encoder import NewsEncoder, pad_titles
from .user_encoder import UserEncoder, UserRepresentation


@dataclass
class Batch:
    titles: torch.Tensor  # (U, Lt) token ids of the distinct news in the batch
    title_mask: torch.Tensor
    hist_news: torch.Tensor  # (B, L) rows into ``titles``
    hist_types: torch.Tensor
    hist_dwell: torch.Tensor
    hist_gap: torch.Tensor
    hist_mask: torch.Tensor
    cand_news: torch.Tensor  # (B, C) rows into ``titles``
    cand_mask: torch.Tensor

    @property
    def size(self) -> int:
        return self.hist_news.shape[0]


@dataclass
class UserSequence:
    times: np.ndarray
    news: np.ndarray
    types: np.ndarray
    dwell: np.ndarray
    gap: np.ndarray


class FeedData:
    """Per-user feedback sequences and the title table, ready for batching."""

    def __init__(
        self,
        corpus: Corpus,
        T: float = 10,
        skip_rate: float = 0.1,
        seed: int = 0,
        drop_types: Iterable[str] = (),
        max_seq: int = 50,
        title_len: int = 30,
    ) -> None:
        self.max_seq = max_seq
        self.news_ids = [a.news_id for a in corpus.catalog]
        self.news_index = {n: i for i, n in enumerate(self.news_ids)}
        self.articles = {a.news_id: a for a in corpus.catalog}
        self.titles, self.title_mask = pad_titles([a.title_tokens for a in corpus.catalog], title_len)
        self.vocab_size = int(self.titles.max()) + 1 if self.titles.numel() else 1
        dropped = {FeedbackType(t) for t in drop_types}
        records = subsample_skips(corpus.derive(T), skip_rate, seed)
        records = [r for r in records if r.type not in dropped]
        self.users: dict[str, UserSequence] = {}
        for user, seq in group_by_user(records).items():
            self.users[user] = self._sequence(seq)

    def _sequence(self, seq: list[FeedbackRecord]) -> UserSequence:
        times = np.array([r.event_time for r in seq], dtype=np.int64)
        gaps = np.diff(times, prepend=times[:1]) if len(times) else times
        return UserSequence(
            times=times,
            news=np.array([self.news_index[r.news_id] for r in seq], dtype=np.int64),
            types=np.array([TYPE_INDEX[r.type] for r in seq], dtype=np.int64),
            dwell=quantize_times(np.array([r.dwell_time or 0 for r in seq])),
            gap=quantize_times(np.maximum(gaps, 0)),
        )

    def history_slice(self, user_id: str, timestamp: int) -> tuple[UserSequence | None, int, int]:
        seq = self.users.get(user_id)
        if seq is None:
            return None, 0, 0
        end = bisect.bisect_left(seq.times, timestamp)
        return seq, max(0, end - self.max_seq), end

    def history_length(self, user_id: str, timestamp: int) -> int:
        _, start, end = self.history_slice(user_id, timestamp)
        return end - start

    def collate(self, requests: Sequence[tuple[str, int, Sequence[str]]]) -> Batch:
        """Build a batch from ``(user_id, timestamp, candidate news ids)`` triples."""
        B = len(requests)
        slices = [self.history_slice(u, ts) for u, ts, _ in requests]
        L = max([end - start for _, start, end in slices] + [1])
        C = max(len(c) for _, _, c in requests)
        hist = {k: np.zeros((B, L), dtype=np.int64) for k in ("news", "types", "dwell", "gap")}
        hist_mask = np.zeros((B, L), dtype=bool)
        cand = np.zeros((B, C), dtype=np.int64)
        cand_mask = np.zeros((B, C), dtype=bool)
        for b, ((seq, start, end), (_, _, cands)) in enumerate(zip(slices, requests)):
            n = end - start
            if n:
                for k in hist:
                    hist[k][b, :n] = getattr(seq, k)[start:end]
                hist_mask[b, :n] = True
            cand[b, : len(cands)] = [self.news_index[c] for c in cands]
            cand_mask[b, : len(cands)] = True
        used = np.unique(np.concatenate([hist["news"][hist_mask], cand[cand_mask]]))
        remap = np.zeros(len(self.news_ids), dtype=np.int64)
        remap[used] = np.arange(len(used))
        titles = self.titles[torch.from_numpy(used)]
        title_mask = self.title_mask[torch.from_numpy(used)]
        width = max(int(title_mask.sum(-1).max()), 1)
        return Batch(
            titles=titles[:, :width],
            title_mask=title_mask[:, :width],
            hist_news=torch.from_numpy(remap[hist["news"]] * hist_mask),
            hist_types=torch.from_numpy(hist["types"]),
            hist_dwell=torch.from_numpy(hist["dwell"]),
            hist_gap=torch.from_numpy(hist["gap"]),
            hist_mask=torch.from_numpy(hist_mask),
            cand_news=torch.from_numpy(remap[cand] * cand_mask),
            cand_mask=torch.from_numpy(cand_mask),
        )


class FeedRec(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        dim: int = 256,
        heads: int = 16,
        max_seq: int = 50,
        title_len: int = 30,
        dropout: float = 0.2,
        disable_embedding: Iterable[str] = (),
        disable_hetero: bool = False,
        disable_homo: bool = False,
        disable_strong_to_weak: bool = False,
    ) -> None:
        super().__init__()
        self.news_encoder = NewsEncoder(
            vocab_size, dim, heads, max_seq, title_len, dropout, frozenset(disable_embedding)
        )
        self.user_encoder = UserEncoder(dim, heads, dropout, disable_hetero, disable_homo, disable_strong_to_weak)
        self.heads = Heads(dim)
        self.input_dropout = nn.Dropout(dropout)

    def encode(self, batch: Batch) -> tuple[UserRepresentation, torch.Tensor]:
        """User representations and candidate embeddings ``(B, C, d)``."""
        enc = self.news_encoder
        text = enc.encode_titles(batch.titles, batch.title_mask)
        positions = torch.arange(batch.hist_news.shape[1]).expand_as(batch.hist_news)
        history = text[batch.hist_news] + enc.context(positions, batch.hist_types, batch.hist_dwell, batch.hist_gap)
        history = self.input_dropout(history)
        user = self.user_encoder(history, batch.hist_types, batch.hist_mask)
        cand = text[batch.cand_news] + enc.context(torch.zeros_like(batch.cand_news))
        return user, cand

    def forward(self, batch: Batch):
        user, cand = self.encode(batch)
        y, z, t = self.heads(user.u, cand)
        return user, y, z, t
