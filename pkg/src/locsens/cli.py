"""Command-line entry point.

Subcommands: gen-synthetic, train-baseline, train-locsens, evaluate,
retrieve, tag, gradcheck. Every subcommand takes --config (key = value file)
plus flag overrides (flags win), is seeded, and writes its artifacts under
--out. Exit codes: 0 success, 1 validation/runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import baselines, data, evaluation, ranker, workflows
from .config import ConfigError, RunConfig
from .data import Dataset, SyntheticConfig, build_synthetic_dataset, load_dataset, save_dataset
from .evaluation import FrequencyTables, MetricsReport, build_query_set, load_stop_tags
from .geo import GeoCoord
from .nn.precision import set_default_dtype
from .ranker import LocSensModel, TrainConfig, TrainStrategy, TripletEmbeddings, train_locsens


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command", "func")}
    return cfg.override(**flags)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.require("out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_ranked(path: Path, ranked) -> None:
    lines = [f"{rank}\t{rid}\t{score!r}" for rank, (rid, score) in enumerate(ranked, start=1)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)


def cmd_gen_synthetic(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    seed = cfg.get("seed", 0)
    synth = SyntheticConfig(
        n_images=cfg.get("images", 1000),
        n_tags=cfg.get("tags", 50),
        d_feat=cfg.get("feature_dim", 128),
        frac_place=cfg.get("frac_place", 0.2),
        frac_conditioned=cfg.get("frac_conditioned", 0.3),
        frac_invariant=cfg.get("frac_invariant", 0.5),
        regions_per_tag=cfg.get("regions_per_tag", 3),
        place_spread_km=cfg.get("place_spread_km", 8.0),
        region_spread_km=cfg.get("region_spread_km", 8.0),
        feature_noise=cfg.get("feature_noise", 0.1),
        mean_tags=cfg.get("mean_tags", 4.25),
        word_dim=cfg.get("word_dim", 300),
        min_images_per_tag=cfg.get("min_images_per_tag", 10),
        seed=seed,
    )
    dataset = build_synthetic_dataset(synth, cfg.get("val_size", 100), cfg.get("test_size", 200))
    save_dataset(dataset, out)
    print(
        f"generated {len(dataset.records)} records, {len(dataset.vocab)} tags "
        f"(train {len(dataset.split.train)} / val {len(dataset.split.val)} / test {len(dataset.split.test)}) -> {out}"
    )
    return 0


def cmd_train_baseline(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    set_default_dtype(cfg.get("dtype", "float64"))
    dataset = load_dataset(cfg.require("dataset"))
    kind = cfg.require("kind")
    config = baselines.BaselineConfig(
        epochs=cfg.get("epochs", 10),
        batch_size=cfg.get("batch_size", 128),
        lr=cfg.get("lr", 1e-4),
        embed_dim=cfg.get("embed_dim", 300),
        clip_norm=cfg.get("clip_norm", 5.0),
    )
    result = baselines.train_baseline(
        kind,
        dataset.train_records,
        len(dataset.vocab),
        config,
        seed=cfg.get("seed", 0),
        word_vectors=dataset.word_vectors,
    )
    ckpt = out / f"{kind}.lsnn"
    workflows.save_model(ckpt, result.model)
    log_lines = [f"{epoch}\t{loss!r}" for epoch, loss in enumerate(result.epoch_losses)]
    (out / "baseline_log.tsv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(f"trained {kind} for {config.epochs} epochs; final loss {result.epoch_losses[-1]:.6f} -> {ckpt}")
    return 0


def _strategy_from_config(cfg: RunConfig) -> TrainStrategy:
    kind = cfg.get("strategy", "raw")
    if kind == "dropout":
        return TrainStrategy.dropout(
            ramp_epochs=cfg.get("ramp_epochs", 5), zero_prob=cfg.get("zero_prob", 0.5)
        )
    if kind == "sampling":
        return TrainStrategy.sampling(
            final_sigma=cfg.get("sigma_final", 0.0),
            epochs_per_rung=cfg.get("epochs_per_rung", 1),
        )
    if kind == "zeroed":
        return TrainStrategy.zeroed()
    if kind == "raw":
        return TrainStrategy.raw()
    raise ConfigError(f"unknown strategy {kind!r}")


def cmd_train_locsens(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    set_default_dtype(cfg.get("dtype", "float64"))
    dataset = load_dataset(cfg.require("dataset"))
    mcc = workflows.load_model(cfg.require("embeddings"))
    if not isinstance(mcc, baselines.MCCModel):
        raise ConfigError("--embeddings must point to a trained mcc checkpoint")
    embeddings = TripletEmbeddings.from_mcc(mcc, dataset.records)
    strategy = _strategy_from_config(cfg)
    config = TrainConfig(
        epochs=cfg.get("epochs", 10),
        batch_size=cfg.get("batch_size", 256),
        margin=cfg.get("margin", 0.1),
        negatives=cfg.get("negatives", 6),
        negative_mode=cfg.get("negative_mode", "replace_image"),
        lr=cfg.get("lr", 1e-4),
        seed=cfg.get("seed", 0),
        steps_per_epoch=cfg.get("steps_per_epoch"),
    )
    model, logs = train_locsens(dataset.train_records, embeddings, strategy, config)
    ckpt = out / "locsens.lsnn"
    workflows.save_model(ckpt, model)
    log_path = out / "training_log.jsonl"
    log_path.write_text("\n".join(json.dumps(asdict(log)) for log in logs) + "\n", encoding="utf-8")
    print(
        f"trained locsens ({strategy.kind}, negatives={config.negative_mode}) for {config.epochs} epochs; "
        f"final loss {logs[-1].mean_loss:.6f} -> {ckpt}"
    )
    return 0


def _load_scorer(cfg: RunConfig, dataset: Dataset):
    """Returns (model-or-frequency-scope, embeddings-or-None, model_id)."""
    spec = cfg.require("model")
    if spec.startswith("frequency:"):
        scope = spec.split(":", 1)[1]
        if scope not in ("global", "country", "town"):
            raise ConfigError(f"unknown frequency scope {scope!r}")
        return spec, None, f"frequency-{scope}"
    model = workflows.load_model(spec)
    embeddings = None
    if isinstance(model, LocSensModel):
        mcc = workflows.load_model(cfg.require("embeddings"))
        if not isinstance(mcc, baselines.MCCModel):
            raise ConfigError("--embeddings must point to a trained mcc checkpoint")
        embeddings = TripletEmbeddings.from_mcc(mcc, dataset.records)
    return model, embeddings, Path(spec).stem


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    set_default_dtype(cfg.get("dtype", "float64"))
    dataset = load_dataset(cfg.require("dataset"))
    seed = cfg.get("seed", 0)
    model, embeddings, model_id = _load_scorer(cfg, dataset)

    test_records = dataset.test_records
    records_by_id = {rec.id: rec for rec in test_records}
    universe = workflows.test_tag_universe(test_records)
    stop_ids = set()
    if cfg.get("stop_tags"):
        stop_ids = load_stop_tags(cfg.get("stop_tags"), dataset.vocab)

    metrics = {}
    is_frequency = isinstance(model, str)

    if not is_frequency:
        queries = build_query_set(
            test_records, cfg.get("queries", 200), "location_sensitive",
            min_count=cfg.get("min_count", 10), seed=seed,
        )
        candidates = workflows.dataset_candidates(dataset, dataset.split.test)
        rankings = workflows.retrieval_rankings(model, queries, candidates, k=10, embeddings=embeddings)
        metrics.update(workflows.retrieval_metric_suite(rankings, queries, records_by_id))
        metrics.update(workflows.upper_bound_suite(queries, test_records))

    if is_frequency:
        scope = model.split(":", 1)[1]
        tables = FrequencyTables.from_records(dataset.train_records)
        if stop_ids:
            tables = tables.without_tags(stop_ids)
        tag_ranks = workflows.frequency_rankings(tables, scope, test_records, k=50)
    else:
        tag_ranks = workflows.tagging_rankings(model, test_records, k=50, embeddings=embeddings)
    scored_records = test_records
    if stop_ids:
        tag_ranks, scored_records, universe = workflows.apply_stop_tags(
            tag_ranks, test_records, universe, stop_ids
        )
    metrics.update(workflows.tagging_metric_suite(tag_ranks, scored_records, universe))

    report = MetricsReport(
        metrics=metrics,
        model_id=model_id,
        dataset_id=Path(cfg.require("dataset")).name,
        seed=seed,
    )
    report.write(out / "metrics.tsv")
    for line in report.lines():
        print(line)
    return 0


def cmd_retrieve(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    set_default_dtype(cfg.get("dtype", "float64"))
    dataset = load_dataset(cfg.require("dataset"))
    model, embeddings, _ = _load_scorer(cfg, dataset)
    if isinstance(model, str):
        raise ConfigError("retrieve requires a trained model checkpoint")
    tag_id = dataset.vocab.id_of(cfg.require("tag"))
    coord = GeoCoord(cfg.require("lat"), cfg.require("lon"))
    k = cfg.get("k", 10)
    if isinstance(model, LocSensModel):
        ranked = ranker.retrieve(model, embeddings, tag_id, coord, dataset.split.test, k)
    else:
        candidates = workflows.dataset_candidates(dataset, dataset.split.test)
        ranked = baselines.baseline_rank(model, "retrieve_by_tag", tag_id, candidates, k)
    _write_ranked(out / "retrieval.tsv", ranked)
    return 0


def cmd_tag(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    set_default_dtype(cfg.get("dtype", "float64"))
    dataset = load_dataset(cfg.require("dataset"))
    model, embeddings, _ = _load_scorer(cfg, dataset)
    if isinstance(model, str):
        raise ConfigError("tag requires a trained model checkpoint")
    record = dataset.by_id(cfg.require("image"))
    lat, lon = cfg.get("lat"), cfg.get("lon")
    coord = record.location if lat is None or lon is None else GeoCoord(lat, lon)
    k = cfg.get("k", 10)
    if isinstance(model, LocSensModel):
        ranked = ranker.tag_image(model, embeddings, embeddings.image_vec(record.id), coord, k)
    else:
        h = workflows.model_vocab_size(model)
        ranked = baselines.baseline_rank(model, "tag_image", record.feature.astype(np.float64), range(h), k)
    _write_ranked(out / "tags.tsv", ranked)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    checks = workflows.gradcheck_battery(seed=cfg.get("seed", 0))
    all_passed = True
    for name, report in checks:
        status = "PASS" if report.passed else "FAIL"
        print(f"{name}: max_rel_err={report.global_max:.3e} [{status}]")
        all_passed &= report.passed
    return 0 if all_passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locsens",
        description="Location-sensitive image retrieval and tagging over (image, hashtag, location) triplets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-synthetic", help="generate a planted synthetic dataset")
    common(p)
    p.add_argument("--images", type=int, default=None)
    p.add_argument("--tags", type=int, default=None)
    p.add_argument("--val-size", dest="val_size", type=int, default=None)
    p.add_argument("--test-size", dest="test_size", type=int, default=None)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-baseline", help="train an mlc/mcc/her baseline")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--kind", choices=baselines.BASELINE_KINDS, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("train-locsens", help="train the triplet ranking model")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--embeddings", default=None, help="mcc checkpoint providing image/tag embeddings")
    p.add_argument("--strategy", choices=("zeroed", "raw", "dropout", "sampling"), default=None)
    p.add_argument("--sigma-final", dest="sigma_final", type=float, default=None)
    p.add_argument("--negative-mode", dest="negative_mode", choices=ranker.NEGATIVE_MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.set_defaults(func=cmd_train_locsens)

    p = sub.add_parser("evaluate", help="run retrieval and tagging protocols, emit a metrics report")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--model", default=None, help="checkpoint path or frequency:global|country|town")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--min-count", dest="min_count", type=int, default=None)
    p.add_argument("--stop-tags", dest="stop_tags", default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("retrieve", help="rank test images for a (tag, location) query")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--tag", default=None)
    p.add_argument("--lat", type=float, default=None)
    p.add_argument("--lon", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("tag", help="rank the vocabulary for one image (optionally at a faked location)")
    common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--image", type=int, default=None)
    p.add_argument("--lat", type=float, default=None)
    p.add_argument("--lon", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every layer, loss, and the full scorer")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
