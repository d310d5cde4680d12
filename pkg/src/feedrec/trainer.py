"""Training loop, scoring, gradient check and checkpoint files."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .feedlog import Corpus, FeedbackType, ImpressionLog
from .heads import (
    DWELL_CAP,
    LossWeights,
    TrainingSample,
    build_samples,
    loss_click,
    loss_disentangle,
    loss_dwell,
    loss_finish,
    loss_total,
)
from .metrics import RankedImpression, click_metrics
from .model import Batch, FeedData, FeedRec

log = logging.getLogger(__name__)

LOSS_PARTS = ("finish", "dwell", "disentangle")
EMBEDDING_PARTS = ("position", "type", "dwell", "interval")
FEEDBACK_NAMES = tuple(t.value for t in FeedbackType)


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 3
    dropout: float = 0.2
    K: int = 4
    alpha: float = 0.2
    beta: float = 0.15
    gamma: float = 0.2
    T: float = 10.0
    skip_subsample: float = 0.1
    max_seq: int = 50
    title_len: int = 30
    dim: int = 256
    heads: int = 16
    dwell_cap: float = DWELL_CAP
    valid_fraction: float = 0.05
    test_fraction: float = 0.25
    seed: int = 0
    drop_feedback_type: tuple[str, ...] = ()
    disable_hetero: bool = False
    disable_homo: bool = False
    disable_strong_to_weak: bool = False
    disable_embedding: tuple[str, ...] = ()
    disable_loss: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("drop_feedback_type", "disable_embedding", "disable_loss"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = (value,)
            object.__setattr__(self, name, tuple(sorted(set(value))))
        self.validate()

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise TrainConfigError("learning_rate must be nonnegative")
        for name in ("batch_size", "epochs", "K", "max_seq", "title_len", "dim", "heads"):
            if getattr(self, name) < 1:
                raise TrainConfigError(f"{name} must be positive")
        if self.dim % self.heads:
            raise TrainConfigError("dim must be a multiple of heads")
        if not 0 <= self.dropout < 1:
            raise TrainConfigError("dropout must be in [0, 1)")
        if not 0 < self.skip_subsample <= 1:
            raise TrainConfigError("skip_subsample must be in (0, 1]")
        if self.T <= 0 or self.dwell_cap <= 0:
            raise TrainConfigError("T and dwell_cap must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise TrainConfigError("loss weights must be nonnegative")
        if not (0 <= self.valid_fraction < 1 and 0 <= self.test_fraction < 1
                and self.valid_fraction + self.test_fraction < 1):
            raise TrainConfigError("split fractions must leave a training share")
        for name, allowed in (
            ("drop_feedback_type", FEEDBACK_NAMES),
            ("disable_embedding", EMBEDDING_PARTS),
            ("disable_loss", LOSS_PARTS),
        ):
            bad = set(getattr(self, name)) - set(allowed)
            if bad:
                raise TrainConfigError(f"{name}: unknown values {sorted(bad)}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            0.0 if "finish" in self.disable_loss else self.alpha,
            0.0 if "dwell" in self.disable_loss else self.beta,
            0.0 if "disentangle" in self.disable_loss else self.gamma,
        )

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainConfigError(f"unknown training keys: {sorted(unknown)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def configure_threads() -> int:
    """Apply ``FEEDREC_THREADS``; 1 selects the deterministic single-thread mode."""
    raw = os.environ.get("FEEDREC_THREADS")
    if raw:
        n = max(1, int(raw))
        torch.set_num_threads(n)
        if n == 1:
            torch.use_deterministic_algorithms(True)
    return torch.get_num_threads()


def split_chronological(
    impressions: Sequence[ImpressionLog], valid_fraction: float = 0.05, test_fraction: float = 0.25
) -> tuple[list[ImpressionLog], list[ImpressionLog], list[ImpressionLog]]:
    """Oldest impressions train, then validation, newest test."""
    ordered = sorted(impressions, key=lambda i: (i.timestamp, i.user_id, i.impression_id))
    n = len(ordered)
    n_test = int(round(n * test_fraction))
    n_valid = int(round(n * valid_fraction))
    n_train = n - n_test - n_valid
    return ordered[:n_train], ordered[n_train : n_train + n_valid], ordered[n_train + n_valid :]


def build_model(config: TrainConfig, vocab_size: int) -> FeedRec:
    return FeedRec(
        vocab_size,
        dim=config.dim,
        heads=config.heads,
        max_seq=config.max_seq,
        title_len=config.title_len,
        dropout=config.dropout,
        disable_embedding=config.disable_embedding,
        disable_hetero=config.disable_hetero,
        disable_homo=config.disable_homo,
        disable_strong_to_weak=config.disable_strong_to_weak,
    )


def prepare_data(corpus: Corpus, config: TrainConfig) -> FeedData:
    return FeedData(
        corpus,
        T=config.T,
        skip_rate=config.skip_subsample,
        seed=config.seed,
        drop_types=config.drop_feedback_type,
        max_seq=config.max_seq,
        title_len=config.title_len,
    )


def sample_batch(data: FeedData, samples: Sequence[TrainingSample]):
    batch = data.collate([(s.user_id, s.timestamp, (s.positive, *s.negatives)) for s in samples])
    finished = torch.tensor([s.finished for s in samples], dtype=torch.float32)
    dwell = torch.tensor([s.dwell for s in samples], dtype=torch.float32)
    return batch, finished, dwell


def compute_losses(model: FeedRec, batch: Batch, finished, dwell, weights: LossWeights) -> dict[str, torch.Tensor]:
    user, y, z, t = model(batch)
    parts = {
        "L_R": loss_click(y[:, 0], y[:, 1:]).mean(),
        "L_F": loss_finish(z[:, 0], finished.to(z.dtype)).mean(),
        "L_T": loss_dwell(t[:, 0], dwell.to(t.dtype)).mean(),
        "L_D": loss_disentangle(user.weak_pos, user.weak_neg).mean(),
    }
    parts["L"] = loss_total(parts["L_R"], parts["L_F"], parts["L_T"], parts["L_D"], weights)
    return parts


@torch.no_grad()
def mean_losses(model: FeedRec, data: FeedData, samples, config: TrainConfig) -> dict[str, float]:
    was_training = model.training
    model.eval()
    totals: dict[str, float] = {}
    for i in range(0, len(samples), 128):
        chunk = samples[i : i + 128]
        parts = compute_losses(model, *sample_batch(data, chunk), config.loss_weights)
        for k, v in parts.items():
            totals[k] = totals.get(k, 0.0) + float(v) * len(chunk)
    model.train(was_training)
    return {k: v / max(len(samples), 1) for k, v in totals.items()}


@torch.no_grad()
def score_impressions(model: FeedRec, data: FeedData, impressions: Sequence[ImpressionLog], batch_size: int = 64):
    """Click/finish/dwell scores for every shown item, one array triple per impression."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(impressions), batch_size):
        chunk = impressions[i : i + batch_size]
        batch = data.collate([(imp.user_id, imp.timestamp, imp.shown_news) for imp in chunk])
        _, y, z, t = model(batch)
        for b, imp in enumerate(chunk):
            n = len(imp.shown_news)
            out.append((y[b, :n].numpy().astype(float), z[b, :n].numpy().astype(float), t[b, :n].numpy().astype(float)))
    model.train(was_training)
    return out


def validation_auc(model: FeedRec, data: FeedData, impressions: Sequence[ImpressionLog]) -> float | None:
    if not impressions:
        return None
    scores = score_impressions(model, data, impressions)
    ranked = [
        RankedImpression.from_labels(imp.impression_id, y, [n in set(imp.clicked) for n in imp.shown_news])
        for imp, (y, _, _) in zip(impressions, scores)
    ]
    return click_metrics(ranked).auc


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    config: TrainConfig
    vocab_size: int
    epoch: int
    rng_state: torch.Tensor
    meta: dict = field(default_factory=dict)

    def build(self) -> FeedRec:
        model = build_model(self.config, self.vocab_size)
        model.load_state_dict(self.params)
        model.eval()
        return model


@dataclass
class TrainResult:
    model: FeedRec
    checkpoint: Checkpoint
    report: dict
    data: FeedData
    splits: tuple[list[ImpressionLog], list[ImpressionLog], list[ImpressionLog]]


def train(
    corpus: Corpus,
    config: TrainConfig,
    progress: Callable[[str], None] | None = None,
    loss_probe: int = 1024,
) -> TrainResult:
    """Fit the model on the chronologically oldest impressions."""
    config.validate()
    torch.manual_seed(config.seed)
    data = prepare_data(corpus, config)
    train_imps, valid_imps, test_imps = split_chronological(
        corpus.impressions, config.valid_fraction, config.test_fraction
    )
    samples, dropped = build_samples(train_imps, corpus.records, config.K, config.seed, config.dwell_cap)
    if not samples:
        raise TrainConfigError("empty training set")
    model = build_model(config, data.vocab_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    weights = config.loss_weights

    probe_idx = torch.randperm(len(samples), generator=torch.Generator().manual_seed(config.seed + 1))[:loss_probe]
    probe = [samples[int(i)] for i in probe_idx]
    initial = mean_losses(model, data, probe, config) if loss_probe else {}

    epochs = []
    started = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(len(samples), generator=gen)
        sums = dict.fromkeys(("L", "L_R", "L_F", "L_T", "L_D"), 0.0)
        for i in range(0, len(samples), config.batch_size):
            chunk = [samples[int(j)] for j in order[i : i + config.batch_size]]
            parts = compute_losses(model, *sample_batch(data, chunk), weights)
            optimizer.zero_grad(set_to_none=True)
            parts["L"].backward()
            optimizer.step()
            for k in sums:
                sums[k] += float(parts[k].detach()) * len(chunk)
        row = {"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()}}
        row["valid_auc"] = validation_auc(model, data, valid_imps)
        epochs.append(row)
        if progress:
            progress(f"epoch {epoch}: " + " ".join(f"{k}={row[k]:.4f}" for k in ("L", "L_R", "L_F", "L_T", "L_D")) + f" valid_auc={row['valid_auc']}")
    final = mean_losses(model, data, probe, config) if loss_probe else {}
    model.eval()
    report = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "n_train_samples": len(samples),
        "dropped_impressions": dropped,
        "split_sizes": {"train": len(train_imps), "valid": len(valid_imps), "test": len(test_imps)},
        "initial_loss": initial,
        "final_loss": final,
        "epochs": epochs,
        "seconds": time.perf_counter() - started,
    }
    ckpt = Checkpoint(
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=config,
        vocab_size=data.vocab_size,
        epoch=config.epochs,
        rng_state=gen.get_state(),
    )
    return TrainResult(model, ckpt, report, data, (train_imps, valid_imps, test_imps))


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"FEEDRECK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(path: Path | str, ckpt: Checkpoint, version: int = FORMAT_VERSION) -> None:
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "vocab_size": ckpt.vocab_size, "epoch": ckpt.epoch, "meta": ckpt.meta},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    torch.save({"params": ckpt.params, "rng_state": ckpt.rng_state}, buf)
    payload = buf.getvalue()
    body = MAGIC + struct.pack("<IQ", version, len(header)) + header + struct.pack("<Q", len(payload)) + payload
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path: Path | str) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, file is corrupt")
    version, header_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset = len(MAGIC) + 12
    header = json.loads(body[offset : offset + header_len])
    offset += header_len
    (payload_len,) = struct.unpack_from("<Q", body, offset)
    payload = body[offset + 8 : offset + 8 + payload_len]
    state = torch.load(io.BytesIO(payload), weights_only=True)
    return Checkpoint(
        params=state["params"],
        config=TrainConfig.from_dict(header["config"]),
        vocab_size=header["vocab_size"],
        epoch=header["epoch"],
        rng_state=state["rng_state"],
        meta=header.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# gradient check

PARAM_GROUPS = (
    ("token_table", ("news_encoder.token.",)),
    ("title_transformer", ("news_encoder.title_transformer.", "news_encoder.title_pool.", "news_encoder.title_norm.")),
    ("context_tables", ("news_encoder.position_table.", "news_encoder.type_table.", "news_encoder.dwell_table.", "news_encoder.interval_table.")),
    ("hetero_transformer", ("user_encoder.hetero.",)),
    ("homo_transformers", ("user_encoder.homo.",)),
    ("queries", ("user_encoder.q_share", "user_encoder.q_dislike", "user_encoder.plain_queries.")),
    ("gates", ("user_encoder.v_",)),
    ("aggregate_weights", ("user_encoder.mix",)),
    ("W_z", ("heads.W_z",)),
    ("W_t", ("heads.W_t",)),
)


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failed_groups(self) -> list[str]:
        return [g for g, e in self.errors.items() if not e < self.tolerance]


def param_group(name: str) -> str:
    for group, prefixes in PARAM_GROUPS:
        if any(name.startswith(p) for p in prefixes):
            return group
    raise KeyError(name)


def _toy_batch(rng: np.random.Generator, vocab: int, n_users: int, seq_len: int, n_cand: int, title_len: int):
    types = []
    for _ in range(n_users):
        row = list(range(len(FeedbackType))) + list(rng.integers(0, len(FeedbackType), size=seq_len - len(FeedbackType)))
        rng.shuffle(row)
        types.append(row)
    n_news = n_users * (seq_len + n_cand)
    lengths = rng.integers(1, title_len + 1, size=n_news)
    titles = np.zeros((n_news, title_len), dtype=np.int64)
    for i, n in enumerate(lengths):
        titles[i, :n] = rng.integers(0, vocab, size=n)
    title_mask = np.arange(title_len)[None, :] < lengths[:, None]
    hist_mask = np.ones((n_users, seq_len), dtype=bool)
    hist_mask[0, -2:] = False  # exercise padding
    return Batch(
        titles=torch.from_numpy(titles),
        title_mask=torch.from_numpy(title_mask),
        hist_news=torch.arange(n_users * seq_len).reshape(n_users, seq_len),
        hist_types=torch.tensor(types),
        hist_dwell=torch.from_numpy(rng.integers(0, 13, size=(n_users, seq_len))),
        hist_gap=torch.from_numpy(rng.integers(0, 13, size=(n_users, seq_len))),
        hist_mask=torch.from_numpy(hist_mask),
        cand_news=n_users * seq_len + torch.arange(n_users * n_cand).reshape(n_users, n_cand),
        cand_mask=torch.ones(n_users, n_cand, dtype=torch.bool),
    )


def gradcheck(
    config: TrainConfig | None = None,
    seed: int = 0,
    dim: int = 8,
    heads: int = 2,
    coords: int = 10,
    step: float = 1e-4,
    tolerance: float = 1e-3,
    floor: float = 1e-6,
    corrupt: str | None = None,
) -> GradcheckReport:
    """Compare autograd gradients of the total loss with central differences.

    A miniature float64 model with every parameter randomized is evaluated on a
    random batch containing all six feedback types. ``corrupt`` names a group
    whose analytic gradient is deliberately falsified (fault injection).
    """
    started = time.perf_counter()
    config = replace(config or TrainConfig(), dim=dim, heads=heads, dropout=0.0, max_seq=16, title_len=6)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    vocab = 20
    model = build_model(config, vocab).double().eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("mix"):
                p.copy_(torch.tensor([1.0, 0.8, -1.0, -0.7], dtype=p.dtype) + 0.1 * torch.randn_like(p))
            elif "norm" in name and name.endswith("weight"):
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
            else:
                p.copy_(0.3 * torch.randn_like(p))
    batch = _toy_batch(rng, vocab, n_users=2, seq_len=12, n_cand=config.K + 1, title_len=config.title_len)
    finished = torch.tensor([1.0, 0.0], dtype=torch.float64)
    dwell = torch.tensor([0.7, 0.2], dtype=torch.float64)
    weights = LossWeights(0.5, 0.5, 0.5)

    # redraw W_t until the dwell head is off its ReLU floor for every positive
    with torch.no_grad():
        for _ in range(100):
            user, cand = model.encode(batch)
            pre = (user.u * (cand[:, 0] @ model.heads.W_t.T)).sum(-1)
            if bool((pre > 1e-3).all()):
                break
            model.heads.W_t.copy_(0.3 * torch.randn_like(model.heads.W_t))

    def loss() -> torch.Tensor:
        return compute_losses(model, batch, finished, dwell, weights)["L"]

    model.zero_grad()
    loss().backward()
    named = dict(model.named_parameters())
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in named.items()}
    if corrupt is not None:
        hit = [n for n in grads if param_group(n) == corrupt]
        if not hit:
            raise KeyError(f"no parameter group {corrupt!r}")
        for n in hit:
            grads[n] = grads[n] * 1.5 + 1e-2

    errors: dict[str, float] = {}
    for group, _ in PARAM_GROUPS:
        names = [n for n in named if param_group(n) == group]
        if not names:
            continue
        sizes = np.array([named[n].numel() for n in names])
        picks = rng.choice(int(sizes.sum()), size=min(coords, int(sizes.sum())), replace=False)
        worst = 0.0
        for flat in picks:
            k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
            local = int(flat - (sizes[:k].sum() if k else 0))
            p = named[names[k]]
            view = p.data.view(-1)
            with torch.no_grad():
                orig = view[local].item()
                view[local] = orig + step
                plus = loss().item()
                view[local] = orig - step
                minus = loss().item()
                view[local] = orig
            numeric = (plus - minus) / (2 * step)
            analytic = grads[names[k]].view(-1)[local].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
        errors[group] = worst
    return GradcheckReport(errors, tolerance, time.perf_counter() - started)
