"""Multi-feedback user encoder.

Pipeline: a heterogeneous Transformer over the mixed feedback sequence, one
homogeneous Transformer per feedback type, strong-to-weak attention, and gated
aggregation into a single user vector.

Strong-to-weak attention chains its queries:

* shares and dislikes are pooled with learned queries into the explicit
  positive / negative vectors,
* finishes are pooled with the explicit positive vector as query and quick
  closes with the explicit negative vector,
* clicks and skips are each pooled twice, once with the positive query
  (explicit + implicit positive) and once with the negative one.

Any group with no records pools to the zero vector.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, fields

import torch
from torch import nn

from .feedlog import FeedbackType, TYPE_INDEX
from .layers import INIT_STD, TransformerBlock, dot_attention

SHARE, FINISH, CLICK, SKIP, QUICK_CLOSE, DISLIKE = (
    TYPE_INDEX[t]
    for t in (
        FeedbackType.SHARE,
        FeedbackType.FINISH,
        FeedbackType.CLICK,
        FeedbackType.SKIP,
        FeedbackType.QUICK_CLOSE,
        FeedbackType.DISLIKE,
    )
)
AGGREGATE_INIT = (1.0, 1.0, -1.0, -1.0)


class UserEncoderError(ValueError):
    pass


@dataclass
class UserRepresentation:
    u: torch.Tensor
    strong_pos: torch.Tensor
    strong_neg: torch.Tensor
    weak_pos: torch.Tensor
    weak_neg: torch.Tensor
    explicit_pos: torch.Tensor
    explicit_neg: torch.Tensor
    implicit_pos: torch.Tensor
    implicit_neg: torch.Tensor
    click_pos: torch.Tensor
    skip_pos: torch.Tensor
    click_neg: torch.Tensor
    skip_neg: torch.Tensor
    gates: dict | None = None

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "gates"}


def group_by_type(
    hidden: torch.Tensor, types: torch.Tensor, mask: torch.Tensor, kind: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pull out the rows of one feedback type, keeping chronological order.

    ``hidden`` is ``(B, L, d)``; returns ``(B, C, d)`` rows and a ``(B, C)``
    mask where ``C`` is the largest per-user count (possibly 0).
    """
    hit = mask & (types == kind)
    counts = hit.sum(-1)
    width = int(counts.max()) if counts.numel() else 0
    if width == 0:
        return hidden.new_zeros(hidden.shape[0], 0, hidden.shape[-1]), hit[:, :0]
    order = torch.argsort((~hit).to(torch.int8), dim=-1, stable=True)[:, :width]
    rows = hidden.gather(1, order.unsqueeze(-1).expand(-1, -1, hidden.shape[-1]))
    group_mask = torch.arange(width).unsqueeze(0) < counts.unsqueeze(-1)
    return rows, group_mask


def attend_explicit(r_share, r_dislike, q_share, q_dislike, share_mask=None, dislike_mask=None, scale=1.0):
    u_pe, _ = dot_attention(q_share, r_share, share_mask, scale)
    u_ne, _ = dot_attention(q_dislike, r_dislike, dislike_mask, scale)
    return u_pe, u_ne


def attend_strong_implicit(r_finish, r_quick, u_pe, u_ne, finish_mask=None, quick_mask=None, scale=1.0):
    u_pi, _ = dot_attention(u_pe, r_finish, finish_mask, scale)
    u_ni, _ = dot_attention(u_ne, r_quick, quick_mask, scale)
    return u_pi, u_ni


def attend_weak(r_click, r_skip, u_pe, u_pi, u_ne, u_ni, click_mask=None, skip_mask=None, scale=1.0):
    pos_query = u_pe + u_pi
    neg_query = u_ne + u_ni
    u_pc, _ = dot_attention(pos_query, r_click, click_mask, scale)
    u_pn, _ = dot_attention(pos_query, r_skip, skip_mask, scale)
    u_nc, _ = dot_attention(neg_query, r_click, click_mask, scale)
    u_nn, _ = dot_attention(neg_query, r_skip, skip_mask, scale)
    return u_pc, u_pn, u_nc, u_nn


def gate(v: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``delta = sigmoid(v . [a; b])``; returns ``(delta, delta*a + (1-delta)*b)``."""
    delta = torch.sigmoid((torch.cat([a, b], dim=-1) * v).sum(-1, keepdim=True))
    return delta.squeeze(-1), delta * a + (1 - delta) * b


def aggregate(u_pe, u_pi, u_ne, u_ni, u_pc, u_pn, u_nc, u_nn, *, v_sp, v_sn, v_wp, v_wn, weights):
    """Gate the strong and weak pairs, then mix the four parts with ``weights``."""
    d_sp, s_p = gate(v_sp, u_pe, u_pi)
    d_sn, s_n = gate(v_sn, u_ne, u_ni)
    d_wp, w_p = gate(v_wp, u_pc, u_pn)
    d_wn, w_n = gate(v_wn, u_nc, u_nn)
    u = weights[0] * s_p + weights[1] * w_p + weights[2] * s_n + weights[3] * w_n
    return UserRepresentation(
        u=u,
        strong_pos=s_p,
        strong_neg=s_n,
        weak_pos=w_p,
        weak_neg=w_n,
        explicit_pos=u_pe,
        explicit_neg=u_ne,
        implicit_pos=u_pi,
        implicit_neg=u_ni,
        click_pos=u_pc,
        skip_pos=u_pn,
        click_neg=u_nc,
        skip_neg=u_nn,
        gates={"strong_pos": d_sp, "strong_neg": d_sn, "weak_pos": d_wp, "weak_neg": d_wn},
    )


class UserEncoder(nn.Module):
    def __init__(
        self,
        dim: int = 256,
        heads: int = 16,
        dropout: float = 0.2,
        disable_hetero: bool = False,
        disable_homo: bool = False,
        disable_strong_to_weak: bool = False,
    ) -> None:
        super().__init__()
        if dim % heads:
            raise UserEncoderError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.disable_hetero = disable_hetero
        self.disable_homo = disable_homo
        self.disable_strong_to_weak = disable_strong_to_weak
        # pooled vectors have norm near sqrt(dim); unscaled logits saturate the softmax at init
        self.attn_scale = dim**-0.5
        head_dim = dim // heads
        self.hetero = TransformerBlock(dim, heads, head_dim, dropout=dropout)
        self.homo = nn.ModuleDict(
            {t.value: TransformerBlock(dim, heads, head_dim, dropout=dropout) for t in FeedbackType}
        )
        self.q_share = nn.Parameter(torch.randn(dim) * INIT_STD)
        self.q_dislike = nn.Parameter(torch.randn(dim) * INIT_STD)
        self.v_strong_pos = nn.Parameter(torch.zeros(2 * dim))
        self.v_strong_neg = nn.Parameter(torch.zeros(2 * dim))
        self.v_weak_pos = nn.Parameter(torch.zeros(2 * dim))
        self.v_weak_neg = nn.Parameter(torch.zeros(2 * dim))
        self.mix = nn.Parameter(torch.tensor(AGGREGATE_INIT))
        if disable_strong_to_weak:
            self.plain_queries = nn.ParameterDict(
                {
                    name: nn.Parameter(torch.randn(dim) * INIT_STD)
                    for name in ("finish", "quick_close", "click_pos", "skip_pos", "click_neg", "skip_neg")
                }
            )

    def hetero_transform(self, embeddings: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.disable_hetero:
            return embeddings
        return self.hetero(embeddings, mask)

    def homo_transform(self, rows: torch.Tensor, mask: torch.Tensor, kind: FeedbackType) -> torch.Tensor:
        if self.disable_homo or rows.shape[-2] == 0:
            return rows
        return self.homo[kind.value](rows, mask)

    def forward(self, embeddings: torch.Tensor, types: torch.Tensor, mask: torch.Tensor) -> UserRepresentation:
        """``embeddings`` ``(B, L, d)``, ``types`` ``(B, L)``, ``mask`` ``(B, L)``."""
        hidden = self.hetero_transform(embeddings, mask)
        reps = {}
        for kind in FeedbackType:
            rows, group_mask = group_by_type(hidden, types, mask, TYPE_INDEX[kind])
            reps[kind] = (self.homo_transform(rows, group_mask, kind), group_mask)
        r_s, m_s = reps[FeedbackType.SHARE]
        r_d, m_d = reps[FeedbackType.DISLIKE]
        r_f, m_f = reps[FeedbackType.FINISH]
        r_q, m_q = reps[FeedbackType.QUICK_CLOSE]
        r_c, m_c = reps[FeedbackType.CLICK]
        r_n, m_n = reps[FeedbackType.SKIP]

        sc = self.attn_scale
        u_pe, u_ne = attend_explicit(r_s, r_d, self.q_share, self.q_dislike, m_s, m_d, sc)
        if self.disable_strong_to_weak:
            q = self.plain_queries
            u_pi, _ = dot_attention(q["finish"], r_f, m_f, sc)
            u_ni, _ = dot_attention(q["quick_close"], r_q, m_q, sc)
            u_pc, _ = dot_attention(q["click_pos"], r_c, m_c, sc)
            u_pn, _ = dot_attention(q["skip_pos"], r_n, m_n, sc)
            u_nc, _ = dot_attention(q["click_neg"], r_c, m_c, sc)
            u_nn, _ = dot_attention(q["skip_neg"], r_n, m_n, sc)
        else:
            u_pi, u_ni = attend_strong_implicit(r_f, r_q, u_pe, u_ne, m_f, m_q, sc)
            u_pc, u_pn, u_nc, u_nn = attend_weak(r_c, r_n, u_pe, u_pi, u_ne, u_ni, m_c, m_n, sc)
        return aggregate(
            u_pe, u_pi, u_ne, u_ni, u_pc, u_pn, u_nc, u_nn,
            v_sp=self.v_strong_pos, v_sn=self.v_strong_neg,
            v_wp=self.v_weak_pos, v_wn=self.v_weak_neg,
            weights=self.mix,
        )

    def encode_sequence(self, embeddings: torch.Tensor, type_labels: Sequence[FeedbackType]) -> UserRepresentation:
        """Single-user convenience wrapper over :meth:`forward`."""
        if embeddings.shape[0] == 0:
            raise UserEncoderError("empty feedback sequence")
        types = torch.tensor([TYPE_INDEX[FeedbackType(t)] for t in type_labels]).unsqueeze(0)
        mask = torch.ones_like(types, dtype=torch.bool)
        rep = self.forward(embeddings.unsqueeze(0), types, mask)
        return UserRepresentation(
            **{k: v[0] for k, v in rep.tensors().items()},
            gates={k: v[0] for k, v in rep.gates.items()},
        )

    def grouped_hidden(self, embeddings: torch.Tensor, type_labels: Sequence[FeedbackType]) -> dict:
        """Heterogeneous-Transformer outputs for one user, split by type."""
        if embeddings.shape[0] == 0:
            raise UserEncoderError("empty feedback sequence")
        types = torch.tensor([TYPE_INDEX[FeedbackType(t)] for t in type_labels]).unsqueeze(0)
        mask = torch.ones_like(types, dtype=torch.bool)
        hidden = self.hetero_transform(embeddings.unsqueeze(0), mask)
        return {kind: group_by_type(hidden, types, mask, TYPE_INDEX[kind])[0][0] for kind in FeedbackType}
