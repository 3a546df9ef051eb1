"""End-to-end grid runner (families x splits) and dataset-size ablation."""

from __future__ import annotations

import json
import logging
import multiprocessing
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from vidbench.data_ingest import (
    DatasetSplit,
    FrameLoader,
    TensorCache,
    VideoSample,
    load_manifest,
    split_dataset,
)
from vidbench.evaluation import METRICS_FILE, EvaluationReport, emit_report, evaluate
from vidbench.exceptions import ConfigurationError, IncompleteGridError
from vidbench.model_zoo import ALL_FAMILIES, Family, ModelSpec, build_model
from vidbench.seeding import derive_seed, provenance
from vidbench.training import default_config, train

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("fraction", "full")
DATA_ROOT_ENV = "VIDBENCH_DATA_ROOT"
ABLATION_JSON = "ablation_summary.json"
ABLATION_PNG = "ablation.png"


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run; loadable from one JSON file.

    ``training`` and ``model`` map a family name (or ``"all"``) to
    ``TrainingConfig`` / ``ModelSpec`` field overrides. ``data_root`` falls
    back to ``$VIDBENCH_DATA_ROOT``.
    """

    data_root: str | None = None
    families: list[str] = field(default_factory=lambda: [f.value for f in ALL_FAMILIES])
    splits: list[str] = field(default_factory=lambda: list(SPLIT_NAMES))
    seed: int = 0
    output_root: str = "runs"
    cache_enabled: bool = True
    augment: bool = True
    scale_splits: bool = False
    training: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    allow_download: bool = True
    allow_random_init: bool = False
    workers: int = 1
    tuning_grid: dict = field(default_factory=lambda: {
        "optimizer": ["rmsprop", "sgd_momentum"],
        "initial_lr": [1e-3, 1e-4],
        "batch_size": [8, 16],
    })
    tuning_epochs: int | None = None
    isolate_cells: bool = True

    def __post_init__(self):
        if not self.families:
            raise ConfigurationError("families must be non-empty")
        self.families = [Family.parse(f).value for f in self.families]
        bad = [s for s in self.splits if s not in SPLIT_NAMES]
        if bad or not self.splits:
            raise ConfigurationError(f"splits must be a non-empty subset of {SPLIT_NAMES}")
        if self.data_root is None:
            self.data_root = os.environ.get(DATA_ROOT_ENV)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def _overrides(self, table: Mapping, family: Family) -> dict:
        out = dict(table.get("all", {}))
        out.update(table.get(family.value, {}))
        return out

    def model_spec(self, family) -> ModelSpec:
        family = Family.parse(family)
        return ModelSpec(family, **self._overrides(self.model, family))

    def training_config(self, family):
        family = Family.parse(family)
        return default_config(family).override(seed=self.seed,
                                               **self._overrides(self.training, family))

    def provenance(self) -> dict:
        # where results land and how the work is scheduled do not change them
        hashed = {k: v for k, v in self.to_dict().items()
                  if k not in ("output_root", "workers", "isolate_cells")}
        return provenance(self.seed, hashed)


@dataclass(frozen=True)
class FamilyUplift:
    acc_fraction: float
    acc_full: float

    @property
    def uplift(self) -> float:
        return self.acc_full - self.acc_fraction


@dataclass
class AblationSummary:
    per_family: dict[str, FamilyUplift]
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def mean_uplift(self) -> float:
        return float(np.mean([v.uplift for v in self.per_family.values()]))

    def to_dict(self) -> dict:
        return {
            "per_family": {
                fam: {"acc_fraction": v.acc_fraction, "acc_full": v.acc_full,
                      "uplift": v.uplift}
                for fam, v in self.per_family.items()
            },
            "mean_uplift": self.mean_uplift,
            **self.provenance,
            "seed": self.seed,
        }


def _family_order(name: str) -> int:
    try:
        return list(ALL_FAMILIES).index(Family.parse(name))
    except Exception:
        return len(ALL_FAMILIES)


def ablation_summary(reports: Iterable[EvaluationReport]) -> AblationSummary:
    """Per-family accuracy uplift from the fraction split to the full split."""
    cells: dict[tuple[str, str], EvaluationReport] = {}
    for r in reports:
        key = (r.model_family, r.split_name)
        if key in cells:
            raise ConfigurationError(f"duplicate report for {key}")
        cells[key] = r
    if not cells:
        raise IncompleteGridError("no reports given")
    families = sorted({f for f, _ in cells}, key=_family_order)
    per_family = {}
    for fam in families:
        for split in SPLIT_NAMES:
            if (fam, split) not in cells:
                raise IncompleteGridError(f"missing cell ({fam}, {split})")
        frac, full = cells[(fam, "fraction")], cells[(fam, "full")]
        if frac.per_video and full.per_video:
            if {p.id for p in frac.per_video} != {p.id for p in full.per_video}:
                raise ConfigurationError(f"{fam}: fraction and full were tested on different sets")
        per_family[fam] = FamilyUplift(float(frac.accuracy), float(full.accuracy))
    seeds = {r.provenance.get("seed") for r in cells.values()} - {None}
    provs = {json.dumps(r.provenance, sort_keys=True) for r in cells.values()}
    prov = json.loads(provs.pop()) if len(provs) == 1 else {}
    return AblationSummary(per_family, seeds.pop() if len(seeds) == 1 else None, prov)


def plot_ablation(summary: AblationSummary, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fams = list(summary.per_family)
    x = np.arange(len(fams))
    frac = [summary.per_family[f].acc_fraction for f in fams]
    full = [summary.per_family[f].acc_full for f in fams]
    fig, ax = plt.subplots(figsize=(1.8 * len(fams) + 2, 3.8))
    ax.bar(x - 0.2, frac, 0.4, label="training-fraction")
    ax.bar(x + 0.2, full, 0.4, label="training-full")
    ax.set_xticks(x, fams, rotation=15)
    ax.set_ylim(0, 1)
    ax.set_ylabel("Test accuracy")
    ax.set_title(f"Mean uplift {summary.mean_uplift:+.3f}")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def emit_ablation(summary: AblationSummary, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / ABLATION_JSON
    json_path.write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    return {ABLATION_JSON: json_path, ABLATION_PNG: plot_ablation(summary, out_dir / ABLATION_PNG)}


def collect_reports(root) -> list[EvaluationReport]:
    """Load every ``metrics.json`` below ``root``."""
    return [EvaluationReport.load(p.parent) for p in sorted(Path(root).rglob(METRICS_FILE))]


# --------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    output_root: Path
    reports: dict[tuple[str, str], EvaluationReport]
    failures: dict[tuple[str, str], str]
    summary: AblationSummary | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def cell_dir(output_root, family, split_name) -> Path:
    return Path(output_root) / Family.parse(family).value / split_name


def make_splits(manifest: Sequence[VideoSample], config: ExperimentConfig,
                names: Sequence[str] = SPLIT_NAMES) -> dict[str, DatasetSplit]:
    return {name: split_dataset(manifest, name, config.seed, scale=config.scale_splits)
            for name in names}


def write_split(split: DatasetSplit, out_dir, prov: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"split_{split.split_name}_seed{split.seed}.json"
    data = split.to_dict()
    data.update(prov or {})
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path


def make_loader(config: ExperimentConfig) -> FrameLoader:
    cache = TensorCache(Path(config.output_root) / "cache") if config.cache_enabled else None
    return FrameLoader(cache=cache, workers=config.workers)


def train_cell(family, split: DatasetSplit, config: ExperimentConfig,
               loader: FrameLoader):
    """Build and train one family on one split; returns ``(handle, history)``."""
    family = Family.parse(family)
    handle = build_model(
        config.model_spec(family),
        seed=derive_seed(config.seed, f"init:{family.value}"),
        **({"allow_download": config.allow_download,
            "allow_random_init": config.allow_random_init} if family.has_backbone else {}),
    )
    return train(handle, split, config.training_config(family), augment=config.augment,
                 loader=loader, run_dir=cell_dir(config.output_root, family, split.split_name))


def run_cell(family, split: DatasetSplit, test_seqs, config: ExperimentConfig,
             loader: FrameLoader) -> EvaluationReport:
    """Train one family on one split and evaluate it on the shared test set."""
    handle, _ = train_cell(family, split, config, loader)
    report = evaluate(handle, test_seqs, split.split_name, config.provenance())
    emit_report(report, cell_dir(config.output_root, family, split.split_name))
    return report


def _run_isolated_cell(family, split: DatasetSplit, config_dict: dict) -> EvaluationReport:
    config = ExperimentConfig(**config_dict)
    loader = make_loader(config)
    return run_cell(family, split, loader.load(split.test), config, loader)


def _in_fresh_process(fn, *args):
    # TensorFlow keeps buffers of traced training functions alive for the life
    # of the process; a spawned child per cell hands all of it back on exit
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=1, mp_context=ctx) as pool:
        return pool.submit(fn, *args).result()


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every (family, split) cell; failures are recorded per cell.

    With ``config.isolate_cells`` (the default) each cell trains in its own
    spawned process, so memory is returned between cells and a crash in one
    cell cannot take down the grid.
    """
    if not config.data_root:
        raise ConfigurationError(f"no data root: set data_root or ${DATA_ROOT_ENV}")
    root = Path(config.output_root)
    root.mkdir(parents=True, exist_ok=True)
    prov = config.provenance()
    (root / "experiment.json").write_text(
        json.dumps({"config": config.to_dict(), **prov}, indent=2) + "\n")

    manifest = load_manifest(config.data_root)
    splits = make_splits(manifest, config, config.splits)
    for split in splits.values():
        write_split(split, root / "splits", prov)
    if config.isolate_cells:
        # populate the tensor cache once so cells do not decode in turn
        if config.cache_enabled:
            warm = make_loader(config)
            for sample in {s.id: s for sp in splits.values()
                           for s in sp.test + sp.train + sp.validation}.values():
                if not warm.cache.path_for(sample.id).is_file():
                    warm.load_one(sample)
    else:
        loader = make_loader(config)
        test_seqs = loader.load(next(iter(splits.values())).test)

    reports, failures = {}, {}
    for family in config.families:
        for split_name in config.splits:
            key = (family, split_name)
            try:
                if config.isolate_cells:
                    reports[key] = _in_fresh_process(_run_isolated_cell, family,
                                                     splits[split_name], config.to_dict())
                else:
                    reports[key] = run_cell(family, splits[split_name], test_seqs, config, loader)
            except Exception as exc:
                logger.exception("cell %s failed", key)
                failures[key] = f"{type(exc).__name__}: {exc}"
                out = cell_dir(root, family, split_name)
                out.mkdir(parents=True, exist_ok=True)
                (out / "FAILED.txt").write_text(traceback.format_exc())

    summary = None
    if set(config.splits) == set(SPLIT_NAMES) and reports:
        complete = [r for (f, _), r in reports.items()
                    if all((f, s) in reports for s in SPLIT_NAMES)]
        if complete:
            summary = ablation_summary(complete)
            emit_ablation(summary, root)
    (root / "failures.json").write_text(
        json.dumps({f"{f}/{s}": msg for (f, s), msg in failures.items()}, indent=2) + "\n")
    return ExperimentResult(root, reports, failures, summary)
