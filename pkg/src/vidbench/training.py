"""Optimisation loop, learning-rate schedules, checkpoints and grid tuning."""

from __future__ import annotations

import csv
import enum
import itertools
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import keras
import numpy as np

from vidbench._validation import check_binary_labels, check_sequence_batch
from vidbench.augmentation import augment_frames, params_for_video
from vidbench.data_ingest import DatasetSplit, FrameLoader
from vidbench.exceptions import (
    ConfigurationError,
    InvalidInputError,
    InvalidParameterError,
    SpecError,
    TrainingDivergedError,
)
from vidbench.model_zoo import Family, ModelHandle, ModelSpec, build_model, save_checkpoint
from vidbench.seeding import derive_seed

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "seconds")
PLATEAU_MIN_DELTA = 1e-4


class Optimizer(str, enum.Enum):
    RMSPROP = "rmsprop"
    SGD_MOMENTUM = "sgd_momentum"


@dataclass(frozen=True)
class ExponentialDecay:
    rate: float = 0.8
    kind: str = field(default="exponential", init=False)

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise InvalidParameterError(f"decay rate must be in (0, 1), got {self.rate}")


@dataclass(frozen=True)
class ReduceOnPlateau:
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    kind: str = field(default="plateau", init=False)

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise InvalidParameterError(f"plateau factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise InvalidParameterError("patience must be >= 1")
        if self.min_lr < 0:
            raise InvalidParameterError("min_lr must be >= 0")


def _schedule_from_dict(data) -> ExponentialDecay | ReduceOnPlateau:
    if isinstance(data, (ExponentialDecay, ReduceOnPlateau)):
        return data
    data = dict(data)
    kind = data.pop("kind", None)
    if kind == "exponential":
        return ExponentialDecay(**data)
    if kind == "plateau":
        return ReduceOnPlateau(**data)
    raise ConfigurationError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: Optimizer
    initial_lr: float
    batch_size: int = 8
    epochs: int = 30
    schedule: ExponentialDecay | ReduceOnPlateau = field(default_factory=ExponentialDecay)
    momentum: float = 0.9
    seed: int = 0
    loss: str = "categorical_crossentropy"
    keep_checkpoints: str = "all"
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "schedule", _schedule_from_dict(self.schedule))
        if self.initial_lr <= 0:
            raise InvalidParameterError("initial_lr must be > 0")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise InvalidParameterError("epochs must be >= 0")
        if self.loss != "categorical_crossentropy":
            raise InvalidParameterError("only categorical_crossentropy is supported")
        if self.keep_checkpoints not in ("all", "best_and_last", "none"):
            raise InvalidParameterError(f"bad keep_checkpoints {self.keep_checkpoints!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["optimizer"] = self.optimizer.value
        out["schedule"] = asdict(self.schedule)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingConfig":
        return cls(**dict(data))

    def override(self, **changes) -> "TrainingConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        if "schedule" in changes:
            changes["schedule"] = _schedule_from_dict(changes["schedule"])
        if "optimizer" in changes:
            changes["optimizer"] = Optimizer(changes["optimizer"])
        return replace(self, **changes)


def default_config(family) -> TrainingConfig:
    """Per-family optimizer and schedule.

    Cnn3d uses SGD with momentum, Cnn2dBilstm RMSProp, both with
    reduce-on-plateau; the backbone families use RMSProp with a 0.8
    per-epoch exponential decay and a lower starting rate for fine-tuning.
    """
    family = Family.parse(family)
    if family is Family.CNN3D:
        return TrainingConfig(Optimizer.SGD_MOMENTUM, 1e-3, schedule=ReduceOnPlateau())
    if family is Family.CNN2D_BILSTM:
        return TrainingConfig(Optimizer.RMSPROP, 1e-3, schedule=ReduceOnPlateau())
    if family.has_backbone:
        return TrainingConfig(Optimizer.RMSPROP, 1e-4, schedule=ExponentialDecay(0.8))
    raise SpecError(f"no default config for {family}")  # pragma: no cover


# --------------------------------------------------------------------------
# History


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float | None
    val_accuracy: float | None
    learning_rate: float
    wall_time: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def learning_rates(self) -> list[float]:
        return [r.learning_rate for r in self.records]

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def monitored_losses(self) -> list[float]:
        """Validation losses when every epoch has one, else training losses."""
        if self.records and all(r.val_loss is not None for r in self.records):
            return [r.val_loss for r in self.records]
        return self.train_losses

    @classmethod
    def from_val_losses(cls, losses: Sequence[float], lr: float = 1e-3) -> "TrainingHistory":
        return cls([EpochRecord(i, float(v), 0.0, float(v), 0.0, lr, 0.0)
                    for i, v in enumerate(losses)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([
                    r.epoch, repr(r.train_loss), repr(r.train_accuracy),
                    "" if r.val_loss is None else repr(r.val_loss),
                    "" if r.val_accuracy is None else repr(r.val_accuracy),
                    repr(r.learning_rate), f"{r.wall_time:.3f}",
                ])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainingHistory":
        opt = lambda s: float(s) if s != "" else None  # noqa: E731
        with Path(path).open(newline="") as fh:
            return cls([
                EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["train_acc"]),
                            opt(row["val_loss"]), opt(row["val_acc"]), float(row["lr"]),
                            float(row["seconds"]))
                for row in csv.DictReader(fh)
            ])


# --------------------------------------------------------------------------
# Schedules


def exponential_lr(initial_lr: float, epoch: int, rate: float = 0.8) -> float:
    if initial_lr <= 0:
        raise InvalidParameterError("initial_lr must be > 0")
    return initial_lr * rate ** epoch


def plateau_lr(
    history: TrainingHistory,
    current_lr: float,
    factor: float,
    patience: int,
    min_lr: float,
    min_delta: float = PLATEAU_MIN_DELTA,
) -> float:
    """Learning rate for the next epoch under reduce-on-plateau.

    Replays the monitored losses with a wait counter: an epoch counts as an
    improvement when its loss is below the best so far by at least
    ``min_delta``; otherwise the counter grows, and when it reaches
    ``patience`` a reduction is due and the counter restarts.
    """
    if not 0.0 < factor < 1.0:
        raise InvalidParameterError("factor must be in (0, 1)")
    if patience < 1:
        raise InvalidParameterError("patience must be >= 1")
    losses = history.monitored_losses()
    if not losses:
        return current_lr
    best, wait, reduce_now = math.inf, 0, False
    for loss in losses:
        reduce_now = False
        if loss < best - min_delta:
            best, wait = loss, 0
        else:
            wait += 1
            if wait >= patience:
                reduce_now, wait = True, 0
    if reduce_now:
        return max(current_lr * factor, min_lr)
    return current_lr


# --------------------------------------------------------------------------
# Training loop


class _Batches(keras.utils.PyDataset):
    """Mini-batches over a fixed permutation; no copies of the full array."""

    def __init__(self, X, Y, batch_size, seed):
        super().__init__()
        self.X, self.Y, self.batch_size = X, Y, batch_size
        self.order = np.random.default_rng(seed).permutation(len(X))

    def __len__(self):
        return math.ceil(len(self.X) / self.batch_size)

    def __getitem__(self, i):
        idx = np.sort(self.order[i * self.batch_size:(i + 1) * self.batch_size])
        return self.X[idx], self.Y[idx]


class _FiniteLossGuard(keras.callbacks.Callback):
    def __init__(self, epoch):
        super().__init__()
        self.epoch = epoch

    def on_train_batch_end(self, batch, logs=None):
        loss = (logs or {}).get("loss")
        if loss is not None and not math.isfinite(float(loss)):
            raise TrainingDivergedError(self.epoch, batch, float(loss))


def _make_optimizer(config: TrainingConfig):
    if config.optimizer is Optimizer.SGD_MOMENTUM:
        return keras.optimizers.SGD(learning_rate=config.initial_lr, momentum=config.momentum)
    return keras.optimizers.RMSprop(learning_rate=config.initial_lr)


def _enable_determinism() -> None:
    import tensorflow as tf

    tf.config.experimental.enable_op_determinism()


def _onehot(y: np.ndarray) -> np.ndarray:
    return np.eye(2, dtype=np.float32)[y]


def augment_training_set(X, ids, seed, cache=None, run_dir=None) -> np.ndarray:
    """Replace each training sequence by its augmented version (no new samples)."""
    out = np.empty_like(X)
    audit = {}
    for i, vid in enumerate(ids):
        params = params_for_video(derive_seed(seed, "augment"), vid)
        out[i] = augment_frames(X[i], params)
        audit[vid] = params.to_dict()
        if cache is not None:
            cache.put_params(vid, params)
    if run_dir is not None:
        Path(run_dir, "augmentation_params.json").write_text(
            json.dumps(audit, indent=2, sort_keys=True) + "\n")
    return out


def _prune_checkpoints(ckpt_root: Path, history: TrainingHistory, keep: str) -> dict:
    last = history.records[-1]
    if all(r.val_accuracy is not None for r in history.records):
        best = max(history.records, key=lambda r: (r.val_accuracy, -r.val_loss, -r.epoch))
    else:
        best = min(history.records, key=lambda r: (r.train_loss, r.epoch))
    index = {"best": f"epoch_{best.epoch}", "last": f"epoch_{last.epoch}"}
    if keep != "all":
        for d in ckpt_root.glob("epoch_*"):
            if d.name not in index.values():
                shutil.rmtree(d)
    (ckpt_root / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return index


def fit_arrays(
    handle: ModelHandle,
    X,
    y,
    config: TrainingConfig,
    *,
    X_val=None,
    y_val=None,
    augment: bool = False,
    ids: Sequence[str] | None = None,
    run_dir=None,
    cache=None,
    stop_when: Callable[[ModelHandle, EpochRecord], bool] | None = None,
) -> tuple[ModelHandle, TrainingHistory]:
    """Train ``handle`` in place on arrays; see :func:`train`.

    ``stop_when`` is called after each epoch and ends the run early when it
    returns true; it exists for smoke tests, not as a training policy.
    """
    X = check_sequence_batch(X)
    y = check_binary_labels(y)
    if len(X) == 0:
        raise InvalidInputError("training set is empty")
    if len(X) != len(y):
        raise InvalidInputError(f"X has {len(X)} samples but y has {len(y)}")
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        X_val = check_sequence_batch(X_val)
        Y_val = _onehot(check_binary_labels(y_val))

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(
            {"training": config.to_dict(), "model": handle.spec.to_dict(), "augment": augment},
            indent=2, sort_keys=True) + "\n")

    history = TrainingHistory()
    if config.epochs == 0:
        if run_dir is not None:
            history.to_csv(run_dir / "history.csv")
        return handle, history

    if augment:
        ids = list(ids) if ids is not None else [str(i) for i in range(len(X))]
        X = augment_training_set(X, ids, config.seed, cache=cache, run_dir=run_dir)
    Y = _onehot(y)

    if config.deterministic:
        _enable_determinism()
    keras.utils.set_random_seed(derive_seed(config.seed, "train"))
    optimizer = _make_optimizer(config)
    handle.model.compile(optimizer=optimizer, loss=config.loss, metrics=["accuracy"],
                         jit_compile=False)

    schedule = config.schedule
    lr = config.initial_lr
    ckpt_root = run_dir / "checkpoints" if run_dir is not None else None
    for epoch in range(config.epochs):
        if isinstance(schedule, ExponentialDecay):
            lr = exponential_lr(config.initial_lr, epoch, schedule.rate)
        optimizer.learning_rate = lr
        batches = _Batches(X, Y, config.batch_size, derive_seed(config.seed, f"shuffle:{epoch}"))
        t0 = time.perf_counter()
        try:
            logs = handle.model.fit(batches, epochs=1, verbose=0,
                                    callbacks=[_FiniteLossGuard(epoch)]).history
        except Exception as exc:
            if type(exc).__name__ == "ResourceExhaustedError":
                raise MemoryError(
                    f"out of memory at epoch {epoch} with batch_size={config.batch_size}; "
                    "try a smaller batch size"
                ) from exc
            raise
        train_loss = float(logs["loss"][-1])
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(epoch, len(batches) - 1, train_loss)
        val_loss = val_acc = None
        if has_val:
            res = handle.model.evaluate(X_val, Y_val, batch_size=config.batch_size,
                                        verbose=0, return_dict=True)
            val_loss, val_acc = float(res["loss"]), float(res["accuracy"])
        history.append(EpochRecord(epoch, train_loss, float(logs["accuracy"][-1]),
                                   val_loss, val_acc, lr, time.perf_counter() - t0))
        logger.info("epoch %d loss=%.4f acc=%.3f val_loss=%s lr=%.3g", epoch, train_loss,
                    history.records[-1].train_accuracy, val_loss, lr)
        if ckpt_root is not None:
            if config.keep_checkpoints != "none":
                save_checkpoint(handle, ckpt_root / f"epoch_{epoch}")
                _prune_checkpoints(ckpt_root, history, config.keep_checkpoints)
            history.to_csv(run_dir / "history.csv")
        if stop_when is not None and stop_when(handle, history.records[-1]):
            break
        if isinstance(schedule, ReduceOnPlateau):
            lr = plateau_lr(history, lr, schedule.factor, schedule.patience, schedule.min_lr)
    return handle, history


def train(
    handle: ModelHandle,
    split: DatasetSplit,
    config: TrainingConfig,
    augment: bool = False,
    *,
    loader: FrameLoader | None = None,
    run_dir=None,
) -> tuple[ModelHandle, TrainingHistory]:
    """Train on ``split.train``, monitoring ``split.validation`` when present.

    Augmentation, when enabled, is applied once to the training sequences
    only. With ``run_dir`` set, writes ``config.json``, ``history.csv`` and
    per-epoch checkpoints under ``checkpoints/epoch_<n>/``.
    """
    if not split.train:
        raise InvalidInputError("split has no training samples")
    loader = loader or FrameLoader()
    X, y = loader.arrays(split.train)
    X_val, y_val = loader.arrays(split.validation) if split.validation else (None, None)
    return fit_arrays(handle, X, y, config, X_val=X_val, y_val=y_val, augment=augment,
                      ids=[s.id for s in split.train], run_dir=run_dir, cache=loader.cache)


# --------------------------------------------------------------------------
# Grid tuning

GRID_KEYS = ("optimizer", "initial_lr", "batch_size")
ScoreFn = Callable[[Family, TrainingConfig], tuple[float, float]]


def tune_hyperparameters(
    families: Sequence,
    grid: Mapping[str, Sequence],
    split: DatasetSplit,
    *,
    loader: FrameLoader | None = None,
    epochs: int | None = None,
    seed: int = 0,
    out_path=None,
    build_kwargs: Mapping | None = None,
    score_fn: ScoreFn | None = None,
    model_specs: Mapping | None = None,
) -> dict[Family, TrainingConfig]:
    """Exhaustive search over optimizer x learning rate x batch size.

    Each point is scored by its best validation accuracy across epochs (ties:
    lower validation loss, then smaller learning rate). ``score_fn`` replaces
    the train-and-validate scorer, e.g. for dry runs. ``model_specs`` maps a
    family to the ``ModelSpec`` to tune; families not listed use defaults.
    """
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown grid keys {sorted(unknown)}")
    axes = [list(grid.get(k, [])) for k in GRID_KEYS]
    points = [p for p in itertools.product(*axes)] if all(axes) else []
    if not grid or not any(axes):
        raise ConfigurationError("hyperparameter grid is empty")
    if not points:
        raise ConfigurationError("every grid axis needs at least one value")
    if score_fn is None and not split.validation:
        raise ConfigurationError("tuning needs a validation set (use the fraction split)")

    specs = {Family.parse(f): v for f, v in (model_specs or {}).items()}
    if score_fn is None:
        loader = loader or FrameLoader()
        X, y = loader.arrays(split.train)
        X_val, y_val = loader.arrays(split.validation)

        def score_fn(family, config):
            spec = specs.get(family) or ModelSpec(family)
            handle = build_model(spec, seed=derive_seed(seed, f"init:{family.value}"),
                                 **(dict(build_kwargs or {}) if family.has_backbone else {}))
            _, hist = fit_arrays(handle, X, y, config, X_val=X_val, y_val=y_val)
            best = max(hist.records, key=lambda r: (r.val_accuracy, -r.val_loss))
            return best.val_accuracy, best.val_loss

    rows, best_configs = [], {}
    for family in map(Family.parse, families):
        base = default_config(family).override(seed=seed, epochs=epochs)
        scored = []
        for opt, lr, bs in points:
            config = base.override(optimizer=opt, initial_lr=float(lr), batch_size=int(bs))
            val_acc, val_loss = score_fn(family, config)
            rows.append({"family": family.value, "optimizer": config.optimizer.value,
                         "initial_lr": config.initial_lr, "batch_size": config.batch_size,
                         "val_accuracy": float(val_acc), "val_loss": float(val_loss)})
            scored.append((float(val_acc), float(val_loss), config))
        scored.sort(key=lambda t: (-t[0], t[1], t[2].initial_lr))
        best_configs[family] = scored[0][2]

    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps({
            "seed": seed,
            "rows": rows,
            "best": {f.value: c.to_dict() for f, c in best_configs.items()},
        }, indent=2) + "\n")
    return best_configs
