import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from feedrec.feedlog import FeedbackType
from feedrec.synthgen import GeneratorConfig, generate_corpus
from feedrec.trainer import (
    FORMAT_VERSION,
    CheckpointIntegrityError,
    CheckpointVersionError,
    TrainConfig,
    TrainConfigError,
    gradcheck,
    load_checkpoint,
    prepare_data,
    save_checkpoint,
    score_impressions,
    split_chronological,
    train,
)

SMALL = TrainConfig(dim=16, heads=2, epochs=1, learning_rate=1e-3, batch_size=16)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(GeneratorConfig(n_users=30, n_news=120, n_impressions=240, seed=7))


@pytest.fixture(scope="module")
def trained(corpus):
    return train(corpus, SMALL)


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(TrainConfigError):
            TrainConfig.from_dict({"learning_rat": 0.1})

    @pytest.mark.parametrize(
        "kw",
        [{"dim": 30, "heads": 4}, {"dropout": 1.0}, {"alpha": -1}, {"drop_feedback_type": ("like",)},
         {"disable_loss": ("click",)}, {"valid_fraction": 0.5, "test_fraction": 0.5}],
    )
    def test_invalid(self, kw):
        with pytest.raises(TrainConfigError):
            TrainConfig(**kw)

    def test_round_trip_and_hash(self):
        cfg = TrainConfig(drop_feedback_type=["skip", "share"], seed=3)
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        assert cfg.config_hash() == TrainConfig.from_dict(cfg.to_dict()).config_hash()
        assert cfg.config_hash() != replace(cfg, seed=4).config_hash()

    def test_disabled_losses_zero_weight(self):
        w = TrainConfig(disable_loss=("finish", "disentangle")).loss_weights
        assert (w.alpha, w.beta, w.gamma) == (0.0, 0.15, 0.0)


def test_split_is_chronological(corpus):
    tr, va, te = split_chronological(corpus.impressions, 0.1, 0.2)
    assert len(tr) + len(va) + len(te) == len(corpus.impressions)
    assert len(te) == 48 and len(va) == 24
    assert max(i.timestamp for i in tr) <= min(i.timestamp for i in va)
    assert max(i.timestamp for i in va) <= min(i.timestamp for i in te)


def test_history_strictly_before(corpus):
    data = prepare_data(corpus, SMALL)
    user, seq = next(iter(data.users.items()))
    ts = int(seq.times[len(seq.times) // 2])
    seq, start, end = data.history_slice(user, ts)
    assert (seq.times[start:end] < ts).all()
    assert end == len(seq.times) or seq.times[end] >= ts


def test_dropped_types_absent(corpus):
    data = prepare_data(corpus, replace(SMALL, drop_feedback_type=("finish", "skip")))
    from feedrec.feedlog import TYPE_INDEX

    gone = {TYPE_INDEX[FeedbackType.FINISH], TYPE_INDEX[FeedbackType.SKIP]}
    for seq in data.users.values():
        assert not set(seq.types.tolist()) & gone


def test_training_report(trained):
    rep = trained.report
    assert rep["n_train_samples"] > 0
    assert set(rep["initial_loss"]) == {"L", "L_R", "L_F", "L_T", "L_D"}
    assert len(rep["epochs"]) == 1 and rep["epochs"][0]["valid_auc"] is not None
    assert all(np.isfinite(v) for v in rep["final_loss"].values())


def test_zero_learning_rate_freezes_parameters(corpus):
    torch.manual_seed(SMALL.seed)
    from feedrec.trainer import build_model

    before = build_model(SMALL, prepare_data(corpus, SMALL).vocab_size).state_dict()
    result = train(corpus, replace(SMALL, learning_rate=0.0))
    after = result.model.state_dict()
    assert before.keys() == after.keys()
    for k in before:
        assert torch.equal(before[k], after[k]), k


def test_same_seed_same_epoch_loss(corpus):
    a = train(corpus, SMALL, loss_probe=0).report["epochs"][0]["L"]
    b = train(corpus, SMALL, loss_probe=0).report["epochs"][0]["L"]
    assert a == b


def test_empty_training_set():
    tiny = generate_corpus(GeneratorConfig(n_users=2, n_news=20, n_impressions=2, seed=1))
    with pytest.raises(TrainConfigError):
        train(tiny, replace(SMALL, valid_fraction=0.0, test_fraction=0.9))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, corpus, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained.checkpoint)
        loaded = load_checkpoint(path)
        assert loaded.config == trained.checkpoint.config
        model = loaded.build()
        test = trained.splits[2][:20]
        s1 = score_impressions(trained.model, trained.data, test)
        s2 = score_impressions(model, trained.data, test)
        for a, b in zip(s1, s2):
            for x, y in zip(a, b):
                assert np.array_equal(x, y)

    def test_corruption_detected(self, tmp_path, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained.checkpoint)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_truncated_and_foreign(self, tmp_path, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained.checkpoint)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)
        path.write_bytes(b"not a checkpoint at all, just bytes" * 3)
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained.checkpoint, version=FORMAT_VERSION + 1)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)


class TestGradcheck:
    def test_passes(self):
        report = gradcheck()
        assert report.passed, report.errors
        assert len(report.errors) == 10
        assert all(e >= 0 for e in report.errors.values())

    @pytest.mark.parametrize("group", ["W_z", "gates", "homo_transformers"])
    def test_fault_injection_flagged(self, group):
        report = gradcheck(corrupt=group)
        assert report.failed_groups == [group]
