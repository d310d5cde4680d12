import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from feedrec.feedlog import FeedbackRecord, FeedbackType, NewsArticle, TYPE_INDEX
from feedrec.heads import LossWeights, loss_click, loss_disentangle, loss_dwell, loss_finish, loss_total, score
from feedrec.layers import AdditiveAttention, TransformerBlock, dot_attention, masked_softmax
from feedrec.news_encoder import CANDIDATE, HISTORY, NewsEncoder, NewsEncoderError, pad_titles
from feedrec.user_encoder import UserEncoder, aggregate, gate, group_by_type


@pytest.fixture(autouse=True, scope="module")
def float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def encoder(**kw):
    torch.manual_seed(0)
    enc = NewsEncoder(vocab_size=50, dim=16, heads=2, max_seq=8, title_len=12, dropout=0.0, **kw)
    return enc.eval()


class TestAttention:
    def test_uniform_when_logits_equal(self):
        rows = torch.randn(5, 4)
        pooled, w = dot_attention(torch.zeros(4), rows)
        assert torch.allclose(w, torch.full((5,), 0.2), atol=1e-12)
        assert torch.allclose(pooled, rows.mean(0), atol=1e-12)

    def test_single_element(self):
        rows = torch.randn(1, 4)
        pooled, w = dot_attention(torch.randn(4), rows)
        assert float(w[0]) == 1.0
        assert torch.allclose(pooled, rows[0], atol=1e-12)

    def test_two_logits(self):
        rows = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        query = torch.tensor([math.log(3.0), 0.0])
        _, w = dot_attention(query, rows)
        assert torch.allclose(w, torch.tensor([0.75, 0.25]), atol=1e-12)

    def test_scale_is_query_scaling(self):
        rows, query = torch.randn(6, 4), torch.randn(4)
        a, _ = dot_attention(query, rows, scale=0.5)
        b, _ = dot_attention(query * 0.5, rows)
        assert torch.allclose(a, b, atol=1e-12)

    def test_empty_pools_to_zero(self):
        pooled, w = dot_attention(torch.randn(3, 4), torch.zeros(3, 0, 4))
        assert pooled.shape == (3, 4) and not pooled.any() and w.shape == (3, 0)

    def test_fully_masked_row(self):
        logits = torch.randn(2, 3)
        mask = torch.tensor([[True, False, True], [False, False, False]])
        w = masked_softmax(logits, mask)
        assert not w[1].any() and torch.isfinite(w).all()
        assert float(w[0].sum()) == pytest.approx(1.0) and float(w[0, 1]) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_weights_are_a_distribution(self, n, seed):
        g = torch.Generator().manual_seed(seed)
        _, w = dot_attention(torch.randn(4, generator=g) * 5, torch.randn(n, 4, generator=g) * 5)
        assert float(w.sum()) == pytest.approx(1.0, abs=1e-12)
        assert (w >= 0).all()


class TestNewsEncoder:
    def test_padding_invariance(self):
        enc = encoder()
        title = [3, 7, 11, 2]
        base = enc.encode_title(title)
        for extra in (1, 4, 8):
            tokens, mask = pad_titles([title], 12)
            tokens = torch.cat([tokens, torch.full((1, extra), 9)], 1)  # garbage behind the mask
            mask = torch.cat([mask, torch.zeros(1, extra, dtype=torch.bool)], 1)
            assert torch.allclose(enc.encode_titles(tokens, mask)[0], base, atol=1e-6)

    def test_batched_titles_match_single(self):
        enc = encoder()
        titles = [(1, 2, 3), (4,), (5, 6, 7, 8, 9)]
        tokens, mask = pad_titles(titles, 12)
        batch = enc.encode_titles(tokens, mask)
        for row, t in zip(batch, titles):
            assert torch.allclose(row, enc.encode_title(t), atol=1e-10)

    def test_one_token_title_hand_trace(self):
        enc = encoder()
        x = enc.token.weight[5]
        blk = enc.title_transformer
        # one key: attention returns its own value vector
        v = blk.qkv(blk.norm1(x))[2 * 16 :]
        h = x + blk.out(v)
        h = h + blk.ff2(F.gelu(blk.ff1(blk.norm2(h))))
        # additive pooling over one token is the identity, then the output norm
        assert torch.allclose(enc.encode_title([5]), enc.title_norm(h), atol=1e-10)

    def test_truncation(self):
        enc = encoder()
        long = list(range(1, 20))
        assert torch.allclose(enc.encode_title(long), enc.encode_title(long[:12]), atol=1e-12)

    def test_empty_title_rejected(self):
        with pytest.raises(NewsEncoderError):
            pad_titles([()], 10)

    def test_history_is_sum_of_five_parts(self):
        enc = encoder()
        art = NewsArticle("n", (3, 4, 5), 0)
        rec = FeedbackRecord("U0", "n", FeedbackType.CLICK, 1000, 84)
        out = enc.encode_feedback(rec, art, position=2, prev_event_time=1000 - 30)
        expected = (
            enc.encode_title(art.title_tokens)
            + enc.position_table.weight[2]
            + enc.type_table.weight[TYPE_INDEX[FeedbackType.CLICK]]
            + enc.dwell_table.weight[6]
            + enc.interval_table.weight[4]
        )
        assert torch.allclose(out, expected, atol=1e-12)

    def test_candidate_mode_is_text_plus_position(self):
        enc = encoder()
        art = NewsArticle("n", (3, 4, 5), 0)
        out = enc.encode_feedback(None, art, position=0, mode=CANDIDATE)
        assert torch.allclose(out, enc.encode_title(art.title_tokens) + enc.position_table.weight[0], atol=1e-12)

    def test_disabled_part_is_removed(self):
        full, no_dwell = encoder(), encoder(disabled={"dwell"})
        art = NewsArticle("n", (3,), 0)
        rec = FeedbackRecord("U0", "n", FeedbackType.FINISH, 10, 300)
        diff = full.encode_feedback(rec, art, 1, 5) - no_dwell.encode_feedback(rec, art, 1, 5)
        assert torch.allclose(diff, full.dwell_table.weight[8], atol=1e-12)

    def test_skip_uses_dwell_bucket_zero(self):
        enc = encoder()
        art = NewsArticle("n", (3,), 0)
        out = enc.encode_feedback(FeedbackRecord("U0", "n", FeedbackType.SKIP, 10), art, 0)
        expected = (
            enc.encode_title((3,))
            + enc.position_table.weight[0]
            + enc.type_table.weight[TYPE_INDEX[FeedbackType.SKIP]]
            + enc.dwell_table.weight[0]
            + enc.interval_table.weight[0]
        )
        assert torch.allclose(out, expected, atol=1e-12)

    def test_bad_inputs(self):
        enc = encoder()
        art = NewsArticle("n", (3,), 0)
        with pytest.raises(NewsEncoderError):
            enc.encode_feedback(None, art, 0, mode=HISTORY)
        with pytest.raises(NewsEncoderError):
            enc.encode_feedback(None, art, 8, mode=CANDIDATE)
        with pytest.raises(NewsEncoderError):
            enc.encode_title([99])


class TestTransformerBlock:
    def test_masked_positions_do_not_leak(self):
        torch.manual_seed(1)
        blk = TransformerBlock(8, 2, 4).eval()
        x = torch.randn(1, 5, 8)
        mask = torch.tensor([[True, True, True, False, False]])
        y1 = blk(x, mask)
        x2 = x.clone()
        x2[0, 3:] = torch.randn(2, 8) * 100
        y2 = blk(x2, mask)
        assert torch.allclose(y1[0, :3], y2[0, :3], atol=1e-10)

    def test_empty_sequence(self):
        blk = TransformerBlock(8, 2, 4)
        x = torch.zeros(2, 0, 8)
        assert blk(x, torch.zeros(2, 0, dtype=torch.bool)).shape == (2, 0, 8)

    def test_head_mismatch(self):
        with pytest.raises(ValueError):
            TransformerBlock(8, 3, 2)

    def test_additive_pool_single(self):
        pool = AdditiveAttention(4, 3)
        x = torch.randn(1, 1, 4)
        out, w = pool(x)
        assert torch.allclose(out, x[:, 0]) and w[0, 0].item() == 1.0


class TestGateAndAggregate:
    def test_zero_v_is_half(self):
        a, b = torch.randn(4), torch.randn(4)
        delta, out = gate(torch.zeros(8), a, b)
        assert float(delta) == 0.5
        assert torch.allclose(out, (a + b) / 2, atol=1e-12)

    def test_equal_inputs_pass_through(self):
        a = torch.randn(4)
        _, out = gate(torch.randn(8), a, a)
        assert torch.allclose(out, a, atol=1e-12)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1))
    def test_convex_combination(self, seed):
        g = torch.Generator().manual_seed(seed)
        a, b, v = torch.randn(4, generator=g), torch.randn(4, generator=g), torch.randn(8, generator=g) * 3
        delta, out = gate(v, a, b)
        assert 0 < float(delta) < 1
        lo, hi = torch.minimum(a, b), torch.maximum(a, b)
        assert ((out >= lo - 1e-12) & (out <= hi + 1e-12)).all()
        expected = torch.sigmoid(v @ torch.cat([a, b]))
        assert float(delta) == pytest.approx(float(expected), abs=1e-12)

    def test_mix_selects_strong_positive(self):
        parts = [torch.randn(4) for _ in range(8)]
        zeros = torch.zeros(8)
        rep = aggregate(*parts, v_sp=zeros, v_sn=zeros, v_wp=zeros, v_wn=zeros, weights=torch.tensor([1.0, 0, 0, 0]))
        assert torch.allclose(rep.u, rep.strong_pos, atol=1e-12)
        assert torch.allclose(rep.strong_pos, (parts[0] + parts[1]) / 2, atol=1e-12)

    def test_mix_linear(self):
        parts = [torch.randn(4) for _ in range(8)]
        v = [torch.randn(8) for _ in range(4)]
        w = torch.tensor([0.3, -1.2, 2.0, 0.5])
        rep = aggregate(*parts, v_sp=v[0], v_sn=v[1], v_wp=v[2], v_wn=v[3], weights=w)
        expected = w[0] * rep.strong_pos + w[1] * rep.weak_pos + w[2] * rep.strong_neg + w[3] * rep.weak_neg
        assert torch.allclose(rep.u, expected, atol=1e-12)


def user_encoder(**kw):
    torch.manual_seed(0)
    return UserEncoder(dim=16, heads=2, dropout=0.0, **kw).eval()


class TestUserEncoder:
    def test_group_by_type_keeps_order(self):
        hidden = torch.arange(6.0).view(1, 6, 1)
        types = torch.tensor([[0, 1, 0, 2, 0, 1]])
        mask = torch.tensor([[True] * 5 + [False]])
        rows, m = group_by_type(hidden, types, mask, 0)
        assert rows[0, :, 0].tolist() == [0.0, 2.0, 4.0] and m.tolist() == [[True, True, True]]
        rows, m = group_by_type(hidden, types, mask, 1)
        assert m.tolist() == [[True]] and rows[0, 0, 0] == 1.0

    def test_click_skip_only_user_is_finite(self):
        enc = user_encoder()
        labels = [FeedbackType.CLICK, FeedbackType.SKIP, FeedbackType.CLICK, FeedbackType.SKIP]
        rep = enc.encode_sequence(torch.randn(4, 16), labels)
        for name, tensor in rep.tensors().items():
            assert torch.isfinite(tensor).all(), name
        assert not rep.explicit_pos.any() and not rep.implicit_neg.any()
        e = torch.randn(5, 16)
        y, z, t = score(rep.u, e, torch.randn(16, 16), torch.randn(16, 16))
        losses = (
            loss_click(y[0], y[1:]),
            loss_finish(z[0], torch.tensor(1.0)),
            loss_dwell(t[0], torch.tensor(0.5)),
            loss_disentangle(rep.weak_pos, rep.weak_neg),
        )
        total = loss_total(*losses, LossWeights())
        assert all(torch.isfinite(x) for x in losses) and torch.isfinite(total)

    def test_no_clicks_or_skips_gradients_finite(self):
        enc = user_encoder()
        x = torch.randn(2, 16, requires_grad=True)
        rep = enc.encode_sequence(x, [FeedbackType.SHARE, FeedbackType.DISLIKE])
        assert not rep.weak_pos.any() and not rep.weak_neg.any()
        (rep.u.sum() + loss_disentangle(rep.weak_pos, rep.weak_neg)).backward()
        assert torch.isfinite(x.grad).all()
        for p in enc.parameters():
            assert p.grad is None or torch.isfinite(p.grad).all()

    def test_strong_to_weak_queries(self):
        enc = user_encoder(disable_hetero=True, disable_homo=True)
        x = torch.randn(4, 16)
        labels = [FeedbackType.SHARE, FeedbackType.FINISH, FeedbackType.FINISH, FeedbackType.CLICK]
        rep = enc.encode_sequence(x, labels)
        assert torch.allclose(rep.explicit_pos, x[0], atol=1e-12)
        w = torch.softmax(x[1:3] @ x[0] / 4.0, 0)  # logits scaled by 1/sqrt(16)
        assert torch.allclose(rep.implicit_pos, w @ x[1:3], atol=1e-12)
        assert torch.allclose(rep.click_pos, x[3], atol=1e-12)

    def test_batch_padding_invariance(self):
        enc = user_encoder()
        x = torch.randn(1, 5, 16)
        types = torch.tensor([[2, 0, 3, 1, 4]])
        mask = torch.ones(1, 5, dtype=torch.bool)
        base = enc(x, types, mask).u
        xp = torch.cat([x, torch.randn(1, 3, 16)], 1)
        tp = torch.cat([types, torch.tensor([[0, 1, 2]])], 1)
        mp = torch.cat([mask, torch.zeros(1, 3, dtype=torch.bool)], 1)
        assert torch.allclose(enc(xp, tp, mp).u, base, atol=1e-6)

    def test_ablation_flags(self):
        # two of each type, so every pooling has a choice to make
        x = torch.randn(12, 16)
        labels = list(FeedbackType) * 2
        base = user_encoder().encode_sequence(x, labels).u
        for kw in ({"disable_hetero": True}, {"disable_homo": True}, {"disable_strong_to_weak": True}):
            other = user_encoder(**kw).encode_sequence(x, labels).u
            assert torch.isfinite(other).all()
            assert not torch.equal(other, base)
