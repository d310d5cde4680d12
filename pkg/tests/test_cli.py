import json

import pytest
import yaml
from click.testing import CliRunner

from feedrec.cli import RunConfig, ConfigError, ablation_variants, main
from feedrec.trainer import TrainConfig

TINY = {
    "generator": {"n_users": 25, "n_news": 100, "n_impressions": 160, "seed": 2},
    "training": {"dim": 16, "heads": 2, "epochs": 1, "learning_rate": 0.001},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    runner = CliRunner()
    res = runner.invoke(main, ["generate", "--config", str(cfg), "--out", str(root / "corpus")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(
        main, ["train", "--config", str(cfg), "--corpus", str(root / "corpus"), "--out", str(root / "model")]
    )
    assert res.exit_code == 0, res.output
    return root


def test_generate_outputs(workspace):
    files = {p.name for p in (workspace / "corpus").iterdir()}
    assert {"news.jsonl", "impressions.jsonl", "feedback.jsonl", "stats.json", "config.yaml"} <= files
    echoed = yaml.safe_load((workspace / "corpus" / "config.yaml").read_text())
    assert echoed["generator"]["n_users"] == 25
    assert RunConfig.from_dict(echoed).generator.n_users == 25


def test_train_outputs(workspace):
    report = json.loads((workspace / "model" / "report.json").read_text())
    assert report["config"]["dim"] == 16
    assert (workspace / "model" / "model.ckpt").stat().st_size > 0


def test_evaluate_twice_identical(workspace):
    runner = CliRunner()
    outs = []
    for name in ("e1", "e2"):
        res = runner.invoke(
            main,
            ["evaluate", "--checkpoint", str(workspace / "model" / "model.ckpt"),
             "--corpus", str(workspace / "corpus"), "--out", str(workspace / name)],
        )
        assert res.exit_code == 0, res.output
        outs.append(workspace / name)
    for f in ("metrics.json", "metrics.txt", "scores.jsonl"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    metrics = json.loads((outs[0] / "metrics.json").read_text())
    assert 0 <= metrics["auc"] <= 1


def test_rank_sorted(workspace):
    res = CliRunner().invoke(
        main,
        ["rank", "--checkpoint", str(workspace / "model" / "model.ckpt"), "--corpus", str(workspace / "corpus"),
         "--user", "U3", "N1", "N2", "N3", "N4", "N5"],
    )
    assert res.exit_code == 0, res.output
    rows = res.output.strip().splitlines()[1:]
    assert len(rows) == 5
    scores = [float(r.split()[1]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    assert sorted(r.split()[0] for r in rows) == ["N1", "N2", "N3", "N4", "N5"]


def test_rank_unknown_news(workspace):
    res = CliRunner().invoke(
        main,
        ["rank", "--checkpoint", str(workspace / "model" / "model.ckpt"), "--corpus", str(workspace / "corpus"),
         "--user", "U3", "N1", "NOPE"],
    )
    assert res.exit_code != 0 and "NOPE" in res.output


def test_corrupt_checkpoint_fails(workspace):
    bad = workspace / "bad.ckpt"
    blob = bytearray((workspace / "model" / "model.ckpt").read_bytes())
    blob[100] ^= 0x55
    bad.write_bytes(bytes(blob))
    res = CliRunner().invoke(
        main, ["evaluate", "--checkpoint", str(bad), "--corpus", str(workspace / "corpus"), "--out", str(workspace / "x")]
    )
    assert res.exit_code != 0
    assert "corrupt" in res.output


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"training": {"epochz": 3}}))
    res = CliRunner().invoke(main, ["generate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert res.exit_code != 0 and "epochz" in res.output
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"serving": {}})


def test_seed_flag_overrides(tmp_path):
    cfg = RunConfig.from_dict(TINY).with_seed(11)
    assert cfg.generator.seed == 11 and cfg.training.seed == 11


def test_gradcheck_exit_codes():
    runner = CliRunner()
    assert runner.invoke(main, ["gradcheck"]).exit_code == 0
    res = runner.invoke(main, ["gradcheck", "--corrupt", "W_t"])
    assert res.exit_code == 1 and "FAIL" in res.output


def test_ablation_matrix_hashes_distinct():
    variants = ablation_variants(TrainConfig(), RunConfig().ablation)
    hashes = [c.config_hash() for _, _, c in variants]
    assert len(set(hashes)) == len(hashes)
    groups = [g for g, _, _ in variants]
    assert groups.count("feedback") == 6 and groups.count("loss") == 3 and groups[0] == "full"
