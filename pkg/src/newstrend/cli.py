"""Command-line driver for the full pipeline.

Subcommands: prepare, synth, train, eval, attn, backtest.  One JSON config
file carries paths, hyperparameters, training and backtest settings plus
the master seed; flags override the settings that vary across experiment
grids (self-paced on/off, architecture ablations, K).  Exit codes are a
stable contract: 0 success, 2 input error, 3 config or shape error,
4 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import dataio, train as tr
from .corpus import (
    LabelThresholds,
    build_samples,
    build_vocabulary,
    compute_thresholds,
    deterministic_embeddings,
    label,
    split_dataset,
)
from .dataio import InputError, PreparedDataset
from .model import (
    CheckpointError,
    HyperParams,
    export_attention,
    init_params,
    load_params,
    save_params,
)
from .synth import SynthConfig, synth_generate

EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4


class ConfigError(Exception):
    """Raised for invalid configuration values or shape inconsistencies."""


@dataclass
class RunConfig:
    seed: int
    paths: dict
    hyper: HyperParams
    train: tr.TrainConfig
    backtest: bt.BacktestConfig
    synth: SynthConfig
    thresholds: LabelThresholds | None
    train_frac: float
    val_frac_of_train: float
    out_dir: Path

    def sub_seed(self, index: int) -> int:
        # One master seed; stable per-purpose streams derived from it.
        return int(np.random.SeedSequence(self.seed).generate_state(8)[index])


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if "seed" not in raw:
        raise ConfigError(f"{path}: config must set an explicit seed")
    try:
        paths = dict(raw.get("paths", {}))
        hyper_kw = dict(raw.get("hyper", {}))
        if "mlp_hidden" in hyper_kw:
            hyper_kw["mlp_hidden"] = tuple(hyper_kw["mlp_hidden"])
        hyper = HyperParams(**hyper_kw)
        train_kw = dict(raw.get("train", {}))
        if "spl" in train_kw:
            train_kw["spl_enabled"] = bool(train_kw.pop("spl"))
        train_kw.setdefault("seed", int(raw["seed"]))
        train_cfg = tr.TrainConfig(**train_kw)
        backtest_cfg = bt.BacktestConfig(**raw.get("backtest", {}))
        synth_kw = dict(raw.get("synth", {}))
        synth_kw.setdefault("dim", hyper.dim)
        synth_cfg = SynthConfig(**synth_kw)
        th = raw.get("thresholds")
        thresholds = LabelThresholds(float(th["down"]), float(th["up"])) if th else None
        split_kw = raw.get("split", {})
        return RunConfig(
            seed=int(raw["seed"]),
            paths=paths,
            hyper=hyper,
            train=train_cfg,
            backtest=backtest_cfg,
            synth=synth_cfg,
            thresholds=thresholds,
            train_frac=float(split_kw.get("train_frac", 2.0 / 3.0)),
            val_frac_of_train=float(split_kw.get("val_frac_of_train", 0.1)),
            out_dir=Path(paths.get("out_dir", "out")),
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _require_path(cfg: RunConfig, key: str) -> Path:
    value = cfg.paths.get(key)
    if not value:
        raise ConfigError(f"config paths.{key} is required for this command")
    p = Path(value)
    if not p.exists():
        raise InputError(f"input path does not exist: {p}")
    return p


def _optional_path(cfg: RunConfig, key: str) -> Path | None:
    value = cfg.paths.get(key)
    if not value:
        return None
    p = Path(value)
    if not p.exists():
        raise InputError(f"input path does not exist: {p}")
    return p


def cmd_prepare(cfg: RunConfig, args) -> int:
    news_path = _require_path(cfg, "news")
    price_path = _require_path(cfg, "prices")
    stop_path = _optional_path(cfg, "stopwords")
    emb_path = _optional_path(cfg, "embeddings")

    news = dataio.read_news(news_path)
    prices = dataio.read_prices(price_path)
    stopwords = dataio.read_stopwords(stop_path) if stop_path else frozenset()
    vocab = build_vocabulary(news, stopwords=stopwords, min_count=5)
    if emb_path:
        emb = dataio.load_embeddings(emb_path, vocab, fallback_seed=cfg.sub_seed(0))
        if emb.dim != cfg.hyper.dim:
            raise ConfigError(
                f"embedding dim {emb.dim} does not match hyper.dim {cfg.hyper.dim}"
            )
    else:
        emb = deterministic_embeddings(vocab, cfg.hyper.dim, seed=cfg.sub_seed(0))

    # Build once with placeholder cuts, then relabel if cuts are computed
    # from the data; labels depend only on the stored rise.
    placeholder = LabelThresholds(-1.0, 1.0)
    samples, skips = build_samples(
        news, prices, emb, vocab,
        th=cfg.thresholds or placeholder,
        n_days=cfg.hyper.n_days, max_news=cfg.hyper.max_news,
    )
    if not samples:
        raise InputError("no samples could be built from the given news and prices")
    if cfg.thresholds is not None:
        th = cfg.thresholds
        source = "config"
    else:
        th = compute_thresholds([s.rise_percent for s in samples])
        for s in samples:
            s.label = label(s.rise_percent, th)
        source = "computed"
    split = split_dataset(samples, cfg.train_frac, cfg.val_frac_of_train, seed=cfg.sub_seed(1))

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(
        cfg.out_dir / "dataset.bin",
        PreparedDataset(split=split, thresholds=th, dim=emb.dim, n_days=cfg.hyper.n_days),
    )
    dataio.write_threshold_report(cfg.out_dir / "thresholds.csv", th, source)
    dataio.write_balance_report(cfg.out_dir / "balance.csv", split)
    dataio.write_skip_report(cfg.out_dir / "skips.csv", skips)
    print(
        f"prepared {len(split.train)} train / {len(split.validation)} val / "
        f"{len(split.test)} test samples ({len(skips)} skipped candidates)"
    )
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    news, prices, truth = synth_generate(cfg.synth, seed=cfg.sub_seed(2))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dataio.write_news(cfg.out_dir / "news.tsv", news)
    dataio.write_prices(cfg.out_dir / "prices.csv", prices)
    dataio.write_truth(cfg.out_dir / "truth.csv", truth)
    labels = [int(t.label) for t in truth.labels]
    shares = [labels.count(c) / len(labels) for c in range(3)]
    print(
        f"synthesized {len(news)} news, {len(prices)} price bars; "
        f"class shares {shares[0]:.3f}/{shares[1]:.3f}/{shares[2]:.3f}"
    )
    return 0


def _apply_train_flags(cfg: RunConfig, args) -> None:
    if args.spl is not None:
        cfg.train.spl_enabled = args.spl == "on"
    if getattr(args, "lambda0", None) is not None:
        cfg.train.lambda0 = args.lambda0
    for name in args.ablate or []:
        if name == "news_attention":
            cfg.hyper = _replace_hyper(cfg.hyper, news_attention=False)
        elif name == "temporal_attention":
            cfg.hyper = _replace_hyper(cfg.hyper, temporal_attention=False)
        elif name == "bidirectional":
            cfg.hyper = _replace_hyper(cfg.hyper, bidirectional=False)
        else:
            raise ConfigError(f"unknown ablation {name!r}")


def _replace_hyper(hyper: HyperParams, **kw) -> HyperParams:
    from dataclasses import asdict

    base = asdict(hyper)
    base.update(kw)
    base["mlp_hidden"] = tuple(base["mlp_hidden"])
    return HyperParams(**base)


def _load_prepared(cfg: RunConfig, args) -> PreparedDataset:
    dataset_path = Path(args.dataset) if args.dataset else cfg.out_dir / "dataset.bin"
    if not dataset_path.exists():
        raise InputError(f"prepared dataset not found: {dataset_path}")
    prepared = dataio.load_dataset(dataset_path)
    return prepared


def cmd_train(cfg: RunConfig, args) -> int:
    _apply_train_flags(cfg, args)
    prepared = _load_prepared(cfg, args)
    if prepared.dim != cfg.hyper.dim or prepared.n_days != cfg.hyper.n_days:
        raise ConfigError(
            f"dataset built for dim={prepared.dim} n_days={prepared.n_days}, "
            f"config wants dim={cfg.hyper.dim} n_days={cfg.hyper.n_days}"
        )
    params = init_params(cfg.hyper, seed=cfg.sub_seed(3))
    best, history = tr.acs_train(
        prepared.split.train,
        prepared.split.validation,
        prepared.split.test,
        cfg.train,
        cfg.hyper,
        params=params,
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_params(cfg.out_dir / "checkpoint.bin", best)
    # The pace and active_fraction columns already record what the sample
    # weighting did, so the header carries only what shapes the artifact;
    # a pace forced above every loss then yields a file identical to a
    # standard run, which is the limiting-case contract.
    meta = {
        "news_attention": int(cfg.hyper.news_attention),
        "temporal_attention": int(cfg.hyper.temporal_attention),
        "bidirectional": int(cfg.hyper.bidirectional),
        "seed": cfg.seed,
        "epochs": cfg.train.epochs,
        "optimizer": cfg.train.optimizer,
    }
    tr.write_history(cfg.out_dir / "history.csv", history, meta)
    final = history.records[history.best_epoch - 1]
    mode = "self-paced" if cfg.train.spl_enabled else "standard"
    print(f"best epoch {history.best_epoch} ({mode}): test accuracy {final.test_acc!r}")
    return 0


def _load_checkpoint(cfg: RunConfig, args):
    ckpt_path = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "checkpoint.bin"
    if not ckpt_path.exists():
        raise InputError(f"checkpoint not found: {ckpt_path}")
    return load_params(ckpt_path)


def cmd_eval(cfg: RunConfig, args) -> int:
    params = _load_checkpoint(cfg, args)
    prepared = _load_prepared(cfg, args)
    if prepared.dim != params.hyper.dim or prepared.n_days != params.hyper.n_days:
        raise CheckpointError("checkpoint shapes do not match the prepared dataset")
    acc, confusion = tr.evaluate(params, prepared.split.test)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out_dir / "metrics.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric,value\n")
        fh.write(f"test_accuracy,{acc!r}\n")
        for i, row_name in enumerate(("DOWN", "PRESERVE", "UP")):
            for j, col_name in enumerate(("DOWN", "PRESERVE", "UP")):
                fh.write(f"confusion_{row_name}_pred_{col_name},{int(confusion[i, j])}\n")
    print(f"test accuracy {acc!r}")
    return 0


def cmd_attn(cfg: RunConfig, args) -> int:
    params = _load_checkpoint(cfg, args)
    prepared = _load_prepared(cfg, args)
    if prepared.dim != params.hyper.dim or prepared.n_days != params.hyper.n_days:
        raise CheckpointError("checkpoint shapes do not match the prepared dataset")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    export_attention(prepared.split.test, params, cfg.out_dir / "attention.csv")
    print(f"wrote attention weights for {len(prepared.split.test)} samples")
    return 0


def cmd_backtest(cfg: RunConfig, args) -> int:
    params = _load_checkpoint(cfg, args)
    prepared = _load_prepared(cfg, args)
    if prepared.dim != params.hyper.dim or prepared.n_days != params.hyper.n_days:
        raise CheckpointError("checkpoint shapes do not match the prepared dataset")
    prices = dataio.read_prices(_require_path(cfg, "prices"))
    if args.k is not None:
        cfg.backtest.k = args.k
    samples_by_date: dict = {}
    for sample in prepared.split.test:
        samples_by_date.setdefault(sample.target_date, []).append(sample)
    result = bt.run_backtest(params, samples_by_date, prices, cfg.backtest)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    bt.write_curves(cfg.out_dir / "curve.csv", result)
    bt.write_trades(cfg.out_dir / "trades.csv", result.trades)
    print(
        f"annualized return {result.annualized_return!r} "
        f"(market baseline {result.baseline_annualized!r})"
    )
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "attn": cmd_attn,
    "backtest": cmd_backtest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="newstrend",
        description="News-driven stock trend prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        if name == "train":
            p.add_argument("--spl", choices=("on", "off"), default=None)
            p.add_argument("--ablate", action="append", default=None,
                           choices=("news_attention", "temporal_attention", "bidirectional"))
            p.add_argument("--lambda0", type=float, default=None,
                           help="explicit initial pace value")
        if name in ("train", "eval", "attn", "backtest"):
            p.add_argument("--dataset", default=None, help="prepared dataset path")
        if name in ("eval", "attn", "backtest"):
            p.add_argument("--checkpoint", default=None)
        if name == "backtest":
            p.add_argument("--k", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
