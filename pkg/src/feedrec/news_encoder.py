"""News encoder: title Transformer plus additive feedback-context embeddings.

A history item is embedded as the sum of five vectors: the title encoding and
lookups for its position in the feedback sequence, its feedback type, its dwell
bucket and the bucket of the gap since the previous feedback. A candidate item
has no feedback yet, so only the title and position terms apply.
"""

from __future__ import annotations

import torch
from torch import nn

from .feedlog import BUCKET_CAP, FeedbackRecord, FeedbackType, NewsArticle, quantize_time
from .layers import INIT_STD, AdditiveAttention, TransformerBlock

EMBEDDING_PARTS = ("position", "type", "dwell", "interval")
HISTORY = "history"
CANDIDATE = "candidate"


class NewsEncoderError(ValueError):
    pass


def pad_titles(titles: list[tuple[int, ...]] | list[list[int]], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Truncate and right-pad token lists. Returns ``(tokens, mask)``."""
    if any(len(t) == 0 for t in titles):
        raise NewsEncoderError("empty title")
    width = min(max_len, max((len(t) for t in titles), default=1))
    tokens = torch.zeros(len(titles), width, dtype=torch.long)
    mask = torch.zeros(len(titles), width, dtype=torch.bool)
    for i, t in enumerate(titles):
        t = list(t)[:width]
        tokens[i, : len(t)] = torch.tensor(t, dtype=torch.long)
        mask[i, : len(t)] = True
    return tokens, mask


class NewsEncoder(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        dim: int = 256,
        heads: int = 16,
        max_seq: int = 50,
        title_len: int = 30,
        dropout: float = 0.2,
        disabled: frozenset[str] | set[str] = frozenset(),
    ) -> None:
        super().__init__()
        unknown = set(disabled) - set(EMBEDDING_PARTS)
        if unknown:
            raise NewsEncoderError(f"unknown embedding parts {sorted(unknown)}")
        if dim % heads:
            raise NewsEncoderError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.max_seq = max_seq
        self.title_len = title_len
        self.disabled = frozenset(disabled)
        self.vocab_size = vocab_size
        self.token = nn.Embedding(vocab_size, dim)
        self.title_transformer = TransformerBlock(dim, heads, dim // heads, dropout=dropout)
        self.title_pool = AdditiveAttention(dim, dim)
        # normalises the pooled title so dot-product scores start at a usable scale
        self.title_norm = nn.LayerNorm(dim)
        self.position_table = nn.Embedding(max_seq, dim)
        self.type_table = nn.Embedding(len(FeedbackType), dim)
        self.dwell_table = nn.Embedding(BUCKET_CAP + 1, dim)
        self.interval_table = nn.Embedding(BUCKET_CAP + 1, dim)
        self.dropout = nn.Dropout(dropout)
        for table in (self.token, self.position_table, self.type_table, self.dwell_table, self.interval_table):
            nn.init.normal_(table.weight, std=INIT_STD)

    def encode_titles(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``(n, L)`` token ids and mask to ``(n, dim)`` text vectors."""
        if tokens.numel() and (not mask.any(-1).all()):
            raise NewsEncoderError("empty title")
        if tokens.numel() and int(tokens.max()) >= self.vocab_size:
            raise NewsEncoderError("token id outside the vocabulary")
        x = self.dropout(self.token(tokens))
        h = self.title_transformer(x, mask)
        pooled, _ = self.title_pool(h, mask)
        return self.title_norm(pooled)

    def encode_title(self, title_tokens) -> torch.Tensor:
        tokens, mask = pad_titles([tuple(title_tokens)], self.title_len)
        return self.encode_titles(tokens, mask)[0]

    def context(
        self,
        positions: torch.Tensor,
        types: torch.Tensor | None = None,
        dwell_buckets: torch.Tensor | None = None,
        interval_buckets: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Sum of the enabled non-text embeddings. ``None`` inputs are omitted."""
        out = None
        for name, table, idx in (
            ("position", self.position_table, positions),
            ("type", self.type_table, types),
            ("dwell", self.dwell_table, dwell_buckets),
            ("interval", self.interval_table, interval_buckets),
        ):
            if idx is None or name in self.disabled:
                continue
            term = table(idx)
            out = term if out is None else out + term
        if out is None:
            out = torch.zeros(*positions.shape, self.dim, dtype=self.position_table.weight.dtype)
        return out

    def encode_feedback(
        self,
        record: FeedbackRecord | None,
        article: NewsArticle,
        position: int,
        prev_event_time: int | None = None,
        mode: str = HISTORY,
    ) -> torch.Tensor:
        """Embed one history feedback or one candidate item."""
        if not 0 <= position < self.max_seq:
            raise NewsEncoderError(f"position {position} outside [0, {self.max_seq})")
        text = self.encode_title(article.title_tokens)
        pos = torch.tensor(position)
        if mode == CANDIDATE:
            return text + self.context(pos)
        if mode != HISTORY:
            raise NewsEncoderError(f"unknown mode {mode!r}")
        if record is None:
            raise NewsEncoderError("history mode needs a feedback record")
        dwell = quantize_time(record.dwell_time) if record.dwell_time is not None else 0
        gap = 0 if prev_event_time is None else quantize_time(max(record.event_time - prev_event_time, 0))
        return text + self.context(pos, torch.tensor(record.type.index), torch.tensor(dwell), torch.tensor(gap))
