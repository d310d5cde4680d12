"""Command-line entry point: generate, train, evaluate, gradcheck, rank, ablate."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import click
import torch
import yaml

from .evaluation import evaluate_split
from .feedlog import Corpus, FeedlogError
from .synthgen import GeneratorConfig, GeneratorConfigError, corpus_stats, generate_corpus
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainConfigError,
    configure_threads,
    gradcheck,
    load_checkpoint,
    prepare_data,
    save_checkpoint,
    split_chronological,
    train,
)

log = logging.getLogger("feedrec")

CHECKPOINT_NAME = "model.ckpt"
FEEDBACK_DROPS = ("click", "skip", "share", "dislike", "finish", "quick_close")
LOSS_DROPS = ("finish", "dwell", "disentangle")
COMPONENT_DROPS = ("disable_hetero", "disable_homo", "disable_strong_to_weak")
EMBEDDING_DROPS = ("position", "type", "dwell", "interval")
ABLATION_GROUPS = ("feedback", "loss", "component", "embedding", "threshold", "click_only")
CLICK_ONLY_DROPS = ("share", "dislike", "finish", "quick_close")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.split not in ("train", "valid", "test"):
            raise ConfigError(f"evaluation.split must be train, valid or test, not {self.split!r}")
        if self.batch_size < 1:
            raise ConfigError("evaluation.batch_size must be positive")


@dataclass(frozen=True)
class AblationConfig:
    groups: tuple[str, ...] = ABLATION_GROUPS
    thresholds: tuple[float, ...] = (5.0, 10.0, 20.0, 30.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        bad = set(self.groups) - set(ABLATION_GROUPS)
        if bad:
            raise ConfigError(f"ablation.groups: unknown values {sorted(bad)}")
        if any(t <= 0 for t in self.thresholds):
            raise ConfigError("ablation.thresholds must be positive")


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping of sections")
        unknown = set(data) - {"generator", "training", "evaluation", "ablation"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            generator=_section(GeneratorConfig, data.get("generator"), "generator"),
            training=_section(TrainConfig, data.get("training"), "training"),
            evaluation=_section(EvalConfig, data.get("evaluation"), "evaluation"),
            ablation=_section(AblationConfig, data.get("ablation"), "ablation"),
        )

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls()
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def with_seed(self, seed: int | None) -> RunConfig:
        if seed is None:
            return self
        return replace(self, generator=replace(self.generator, seed=seed), training=replace(self.training, seed=seed))

    def to_dict(self) -> dict:
        def plain(obj):
            return {f.name: list(v) if isinstance(v := getattr(obj, f.name), tuple) else v for f in fields(obj)}

        return {
            "generator": plain(self.generator),
            "training": self.training.to_dict(),
            "evaluation": plain(self.evaluation),
            "ablation": plain(self.ablation),
        }

    def echo(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.yaml").write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


EXPECTED_ERRORS = (
    ConfigError,
    FeedlogError,
    GeneratorConfigError,
    TrainConfigError,
    CheckpointError,
    OSError,
    KeyError,
    ValueError,
)


def _run(fn):
    try:
        return fn()
    except EXPECTED_ERRORS as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


METRIC_COLUMNS = ["auc", "mrr", "ndcg@5", "hr@5", "share_ratio", "dislike_ratio", "finish_rate", "mean_dwell"]


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Multi-feedback news recommendation experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    configure_threads()


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file.")
seed_option = click.option("--seed", type=int, default=None, help="Override generator and training seeds.")
out_option = click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory.")
corpus_option = click.option(
    "--corpus", "corpus_dir", type=click.Path(file_okay=False, exists=True), required=True, help="Corpus directory."
)
checkpoint_option = click.option(
    "--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False, exists=True), required=True
)


@main.command()
@config_option
@seed_option
@out_option
def generate(config_path, seed, out_dir) -> None:
    """Write a synthetic corpus plus stats.json."""

    def go():
        cfg = RunConfig.load(config_path).with_seed(seed)
        out = Path(out_dir)
        corpus = generate_corpus(cfg.generator)
        corpus.write(out)
        stats = corpus_stats(corpus.derive(cfg.training.T))
        _write_json(out / "stats.json", stats)
        cfg.echo(out)
        counts = stats["counts"]
        click.echo(f"wrote {len(corpus.impressions)} impressions, " + ", ".join(f"{k}={v}" for k, v in counts.items()))

    _run(go)


@main.command("train")
@config_option
@seed_option
@corpus_option
@out_option
def train_cmd(config_path, seed, corpus_dir, out_dir) -> None:
    """Fit a model; writes model.ckpt and report.json."""

    def go():
        cfg = RunConfig.load(config_path).with_seed(seed)
        out = Path(out_dir)
        corpus = Corpus.read(corpus_dir)
        result = train(corpus, cfg.training, progress=lambda m: log.info(m))
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / CHECKPOINT_NAME, result.checkpoint)
        _write_json(out / "report.json", result.report)
        cfg.echo(out)
        init, final = result.report["initial_loss"].get("L"), result.report["final_loss"].get("L")
        click.echo(f"trained {cfg.training.epochs} epochs: loss {_fmt(init)} -> {_fmt(final)}")

    _run(go)


@main.command()
@config_option
@checkpoint_option
@corpus_option
@out_option
def evaluate(config_path, checkpoint_path, corpus_dir, out_dir) -> None:
    """Score a split; writes metrics.json, metrics.txt and scores.jsonl."""

    def go():
        cfg = RunConfig.load(config_path)
        ckpt = load_checkpoint(checkpoint_path)
        cfg = replace(cfg, training=ckpt.config)
        out = Path(out_dir)
        corpus = Corpus.read(corpus_dir)
        model = ckpt.build()
        data = prepare_data(corpus, ckpt.config)
        splits = dict(zip(("train", "valid", "test"), split_chronological(
            corpus.impressions, ckpt.config.valid_fraction, ckpt.config.test_fraction
        )))
        ev = evaluate_split(model, data, corpus, splits[cfg.evaluation.split], cfg.evaluation.batch_size)
        out.mkdir(parents=True, exist_ok=True)
        summary = ev.summary()
        _write_json(out / "metrics.json", summary)
        table = format_table([summary], METRIC_COLUMNS)
        (out / "metrics.txt").write_text(table)
        with open(out / "scores.jsonl", "w") as fh:
            for row in ev.score_rows():
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
        cfg.echo(out)
        click.echo(table, nl=False)

    _run(go)


@main.command("gradcheck")
@config_option
@seed_option
@click.option("--corrupt", default=None, help="Falsify one parameter group's gradient (self-test).")
def gradcheck_cmd(config_path, seed, corrupt) -> None:
    """Finite-difference check of every parameter group; exit 0 on pass."""

    def go():
        cfg = RunConfig.load(config_path)
        report = gradcheck(cfg.training, seed=seed or 0, corrupt=corrupt)
        for group, err in report.errors.items():
            click.echo(f"{group:20s} {err:.3e}  {'ok' if err < report.tolerance else 'FAIL'}")
        click.echo(f"{'passed' if report.passed else 'failed'} in {report.seconds:.1f}s")
        return report.passed

    if not _run(go):
        sys.exit(1)


@main.command()
@checkpoint_option
@corpus_option
@click.option("--user", "user_id", required=True, help="User whose history to use.")
@click.option("--at", "timestamp", type=int, default=None, help="Use history strictly before this time (default: all).")
@click.argument("candidates", nargs=-1, required=True)
def rank(checkpoint_path, corpus_dir, user_id, timestamp, candidates) -> None:
    """Rank candidate news ids for a user by predicted click score."""

    def go():
        ckpt = load_checkpoint(checkpoint_path)
        corpus = Corpus.read(corpus_dir)
        model = ckpt.build()
        data = prepare_data(corpus, ckpt.config)
        unknown = [c for c in candidates if c not in data.news_index]
        if unknown:
            raise KeyError(f"unknown news ids {unknown}")
        ts = timestamp if timestamp is not None else 2**62
        with torch.no_grad():
            _, y, z, t = model(data.collate([(user_id, ts, tuple(candidates))]))
        rows = sorted(
            zip(candidates, y[0].tolist(), z[0].tolist(), t[0].tolist()), key=lambda r: -r[1]
        )
        click.echo(f"{'news_id':12s} {'click':>10s} {'finish':>10s} {'dwell':>10s}")
        for nid, a, b, c in rows:
            click.echo(f"{nid:12s} {a:10.4f} {b:10.4f} {c:10.4f}")

    _run(go)


def ablation_variants(base: TrainConfig, ablation: AblationConfig) -> list[tuple[str, str, TrainConfig]]:
    """``(group, name, config)`` for the full model and every requested variant."""
    out = [("full", "full", base)]
    groups = set(ablation.groups)
    if "feedback" in groups:
        for t in FEEDBACK_DROPS:
            out.append(("feedback", f"-{t}", replace(base, drop_feedback_type=(t,))))
    if "loss" in groups:
        for part in LOSS_DROPS:
            out.append(("loss", f"-L_{part}", replace(base, disable_loss=(part,))))
    if "component" in groups:
        for flag in COMPONENT_DROPS:
            out.append(("component", flag.replace("disable_", "-"), replace(base, **{flag: True})))
    if "embedding" in groups:
        for part in EMBEDDING_DROPS:
            out.append(("embedding", f"-{part}_emb", replace(base, disable_embedding=(part,))))
    if "threshold" in groups:
        for T in ablation.thresholds:
            if T != base.T:
                out.append(("threshold", f"T={T:g}", replace(base, T=T)))
    if "click_only" in groups:
        out.append(
            ("click_only", "click-only",
             replace(base, drop_feedback_type=CLICK_ONLY_DROPS, alpha=0.0, beta=0.0, gamma=0.0)),
        )
    return out


def _plot(rows: list[dict], out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    full = next(r for r in rows if r["group"] == "full")
    for group in ("feedback", "loss", "component", "embedding", "click_only"):
        sel = [r for r in rows if r["group"] == group]
        if not sel:
            continue
        sel = [full] + sel
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
        for ax, metric in zip(axes, ("auc", "finish_rate")):
            vals = [r[metric] if r[metric] is not None else 0.0 for r in sel]
            ax.bar([r["variant"] for r in sel], vals, color=["#555"] + ["#4a7ab0"] * (len(sel) - 1))
            ax.set_title(metric)
            lo = min(vals)
            ax.set_ylim(max(0.0, lo - 0.05), max(vals) + 0.02)
            ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        name = f"ablation_{group}.png"
        fig.savefig(out / name, dpi=100)
        plt.close(fig)
        written.append(name)
    sweep = sorted(
        [r for r in rows if r["group"] in ("threshold", "full")], key=lambda r: r["T"]
    )
    if len(sweep) > 1:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot([r["T"] for r in sweep], [r["auc"] for r in sweep], marker="o", label="auc")
        ax.set_xlabel("quick-close threshold T (s)")
        ax.set_ylabel("test AUC")
        fig.tight_layout()
        fig.savefig(out / "threshold_sweep.png", dpi=100)
        plt.close(fig)
        written.append("threshold_sweep.png")
    return written


def run_ablation(corpus: Corpus, cfg: RunConfig, out: Path, progress=None) -> list[dict]:
    rows = []
    for group, name, variant in ablation_variants(cfg.training, cfg.ablation):
        if progress:
            progress(f"{group}/{name}")
        result = train(corpus, variant)
        split = result.splits[("train", "valid", "test").index(cfg.evaluation.split)]
        summary = evaluate_split(result.model, result.data, corpus, split, cfg.evaluation.batch_size).summary()
        rows.append({"group": group, "variant": name, "config_hash": variant.config_hash(), "T": variant.T, **summary})
    out.mkdir(parents=True, exist_ok=True)
    columns = ["group", "variant", "config_hash"] + METRIC_COLUMNS
    (out / "ablation.txt").write_text(format_table(rows, columns))
    with open(out / "ablation.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _plot(rows, out)
    cfg.echo(out)
    return rows


@main.command()
@config_option
@seed_option
@corpus_option
@out_option
def ablate(config_path, seed, corpus_dir, out_dir) -> None:
    """Train and evaluate the ablation matrix; writes a table and plots."""

    def go():
        cfg = RunConfig.load(config_path).with_seed(seed)
        corpus = Corpus.read(corpus_dir)
        rows = run_ablation(corpus, cfg, Path(out_dir), progress=lambda m: log.info(m))
        click.echo(format_table(rows, ["group", "variant", "config_hash", "auc", "finish_rate"]), nl=False)

    _run(go)


if __name__ == "__main__":
    main()
