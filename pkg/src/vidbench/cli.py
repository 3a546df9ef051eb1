"""Command-line entry point: ``vidbench <subcommand> [options]``.

Exit codes: 0 success, 1 stage failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from vidbench import __version__
from vidbench.data_ingest import load_manifest, write_manifest_csv
from vidbench.evaluation import emit_report, evaluate
from vidbench.exceptions import ConfigurationError, VidbenchError
from vidbench.experiment import (
    DATA_ROOT_ENV,
    SPLIT_NAMES,
    ExperimentConfig,
    ablation_summary,
    cell_dir,
    collect_reports,
    emit_ablation,
    make_loader,
    make_splits,
    run_experiment,
    train_cell,
    write_split,
)
from vidbench.model_zoo import Family, load_checkpoint
from vidbench.training import tune_hyperparameters

logger = logging.getLogger("vidbench")

FAMILY_CHOICES = [f.value for f in Family]


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON experiment config file")
    parser.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    parser.add_argument("--data-root", type=Path,
                        help=f"dataset root or manifest CSV (default: ${DATA_ROOT_ENV})")
    parser.add_argument("--family", action="append", choices=FAMILY_CHOICES,
                        help="model family; repeat for several (default: all four)")
    parser.add_argument("--split", action="append", choices=SPLIT_NAMES,
                        help="split protocol; repeat for both (default: both)")
    parser.add_argument("--out", type=Path, help="output root directory (default: runs)")
    parser.add_argument("--epochs", type=int, help="override the epoch count for every family")
    parser.add_argument("--scale-splits", action="store_true",
                        help="allow proportionally scaled splits for manifests under 2000 videos")
    parser.add_argument("--allow-random-init", action="store_true",
                        help="fall back to random backbone weights if ImageNet weights are missing")
    parser.add_argument("--no-download", action="store_true",
                        help="never download pretrained weights")
    parser.add_argument("--no-augment", action="store_true", help="disable training augmentation")
    parser.add_argument("--no-cache", action="store_true", help="do not cache decoded tensors")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidbench",
        description="Violence-recognition benchmark: ingest, split, tune, train, evaluate, ablate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "prepare": "discover videos, decode and cache 15-frame tensors",
        "split": "write train/validation/test membership for each split",
        "tune": "grid-search optimizer, learning rate and batch size on the fraction split",
        "train": "train one family on one split",
        "evaluate": "evaluate a trained run on the shared test set",
        "ablate": "summarise fraction-vs-full accuracy uplift from existing reports",
        "report": "print a table of all evaluation reports under --out",
        "run": "run the whole grid end to end (train, evaluate, ablate)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "evaluate":
            p.add_argument("--checkpoint", choices=["best", "last"], default="best",
                           help="which saved checkpoint to evaluate (default: best)")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.data_root is not None:
        config.data_root = str(args.data_root)
    if args.family:
        config.families = list(dict.fromkeys(args.family))
    if args.split:
        config.splits = list(dict.fromkeys(args.split))
    if args.out is not None:
        config.output_root = str(args.out)
    if args.epochs is not None:
        config.training = {**config.training,
                           "all": {**config.training.get("all", {}), "epochs": args.epochs}}
    config.scale_splits |= args.scale_splits
    config.allow_random_init |= args.allow_random_init
    config.allow_download &= not args.no_download
    config.augment &= not args.no_augment
    config.cache_enabled &= not args.no_cache
    config.__post_init__()
    return config


def _need_data_root(config) -> str:
    if not config.data_root:
        raise ConfigurationError(f"no data root: pass --data-root or set ${DATA_ROOT_ENV}")
    return config.data_root


def _only_one(values, what):
    if len(values) != 1:
        raise ConfigurationError(f"this command needs exactly one --{what}")
    return values[0]


def cmd_prepare(config: ExperimentConfig) -> int:
    manifest = load_manifest(_need_data_root(config))
    out = Path(config.output_root)
    write_manifest_csv(manifest, out / "manifest.csv")
    config.cache_enabled = True
    make_loader(config).load(manifest)
    print(f"prepared {len(manifest)} videos; cache at {out / 'cache'}")
    return 0


def cmd_split(config: ExperimentConfig) -> int:
    manifest = load_manifest(_need_data_root(config))
    for name, split in make_splits(manifest, config, config.splits).items():
        path = write_split(split, Path(config.output_root) / "splits", config.provenance())
        print(f"{name}: train={len(split.train)} validation={len(split.validation)} "
              f"test={len(split.test)} -> {path}")
    return 0


def cmd_tune(config: ExperimentConfig) -> int:
    manifest = load_manifest(_need_data_root(config))
    split = make_splits(manifest, config, ["fraction"])["fraction"]
    out = Path(config.output_root) / "tuning.json"
    best = tune_hyperparameters(
        config.families, config.tuning_grid, split, loader=make_loader(config),
        epochs=config.tuning_epochs, seed=config.seed, out_path=out,
        build_kwargs={"allow_download": config.allow_download,
                      "allow_random_init": config.allow_random_init},
        model_specs={f: config.model_spec(f) for f in config.families},
    )
    for fam, cfg in best.items():
        print(f"{fam.value}: optimizer={cfg.optimizer.value} lr={cfg.initial_lr} "
              f"batch_size={cfg.batch_size}")
    print(f"wrote {out}")
    return 0


def cmd_train(config: ExperimentConfig) -> int:
    family = _only_one(config.families, "family")
    split_name = _only_one(config.splits, "split")
    manifest = load_manifest(_need_data_root(config))
    split = make_splits(manifest, config, [split_name])[split_name]
    _, history = train_cell(family, split, config, make_loader(config))
    run_dir = cell_dir(config.output_root, family, split_name)
    print(f"trained {family} on {split_name} for {len(history)} epochs -> {run_dir}")
    return 0


def cmd_evaluate(config: ExperimentConfig, which: str) -> int:
    manifest = load_manifest(_need_data_root(config))
    splits = make_splits(manifest, config, config.splits)
    loader = make_loader(config)
    test_seqs = loader.load(next(iter(splits.values())).test)
    for family in config.families:
        for split_name in config.splits:
            run_dir = cell_dir(config.output_root, family, split_name)
            index_path = run_dir / "checkpoints" / "index.json"
            if not index_path.is_file():
                raise ConfigurationError(f"no checkpoints in {run_dir}; train it first")
            ckpt = json.loads(index_path.read_text())[which]
            handle = load_checkpoint(run_dir / "checkpoints" / ckpt)
            report = evaluate(handle, test_seqs, split_name, config.provenance())
            emit_report(report, run_dir)
            print(f"{family}/{split_name}: accuracy={report.accuracy:.4f} "
                  f"f1=({report.f1_class0:.3f}, {report.f1_class1:.3f}) "
                  f"false_positives={report.false_positives}")
    return 0


def cmd_ablate(config: ExperimentConfig) -> int:
    reports = [r for r in collect_reports(config.output_root)
               if Family.parse(r.model_family).value in config.families]
    summary = ablation_summary(reports)
    paths = emit_ablation(summary, config.output_root)
    for fam, v in summary.per_family.items():
        print(f"{fam}: fraction={v.acc_fraction:.4f} full={v.acc_full:.4f} uplift={v.uplift:+.4f}")
    print(f"mean uplift {summary.mean_uplift:+.4f} -> {paths['ablation_summary.json']}")
    return 0


def cmd_report(config: ExperimentConfig) -> int:
    reports = collect_reports(config.output_root)
    if not reports:
        raise ConfigurationError(f"no metrics.json found under {config.output_root}")
    header = f"{'family':<22}{'split':<10}{'accuracy':>10}{'F1(0)':>8}{'F1(1)':>8}{'FP':>6}{'n':>6}"
    print(header)
    print("-" * len(header))
    for r in reports:
        print(f"{r.model_family:<22}{r.split_name:<10}{r.accuracy:>10.4f}{r.f1_class0:>8.3f}"
              f"{r.f1_class1:>8.3f}{r.false_positives:>6d}{r.n_test:>6d}")
    return 0


def cmd_run(config: ExperimentConfig) -> int:
    result = run_experiment(config)
    for (fam, split), rep in result.reports.items():
        print(f"{fam}/{split}: accuracy={rep.accuracy:.4f}")
    for (fam, split), msg in result.failures.items():
        print(f"FAILED {fam}/{split}: {msg}", file=sys.stderr)
    if result.summary is not None:
        print(f"mean uplift {result.summary.mean_uplift:+.4f}")
    return 0 if result.ok else 1


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = _config_from_args(args)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.checkpoint)
        return globals()[f"cmd_{args.command}"](config)
    except (VidbenchError, OSError, ValueError) as exc:
        print(f"vidbench {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
