"""Video discovery, frame extraction, tensor caching and dataset splitting."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from vidbench._validation import FRAME_SIZE, N_FRAMES, SEQUENCE_SHAPE
from vidbench.exceptions import (
    ConfigurationError,
    DecodeError,
    InvalidInputError,
    LabelError,
    SplitSizeError,
)
from vidbench.seeding import PIPELINE_VERSION, derive_seed

logger = logging.getLogger(__name__)

VIDEO_EXTENSIONS = frozenset(
    {".avi", ".mp4", ".mov", ".mkv", ".webm", ".mpg", ".mpeg", ".m4v", ".wmv", ".flv"}
)
MANIFEST_NAME = "manifest.csv"
RESIZE_INTERPOLATION = "bilinear"

# Canonical split sizes for a 2000-video corpus.
CANONICAL_TOTAL = 2000
TEST_SIZE = 400
FRACTION_SIZE = 500
VALIDATION_SIZE = 125


class Label(str, enum.Enum):
    NONVIOLENT = "NonViolent"
    VIOLENT = "Violent"

    @property
    def index(self) -> int:
        return 1 if self is Label.VIOLENT else 0

    @classmethod
    def from_index(cls, index: int) -> "Label":
        if index not in (0, 1):
            raise LabelError(f"class index must be 0 or 1, got {index!r}")
        return cls.VIOLENT if index == 1 else cls.NONVIOLENT

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, (int, np.integer)):
            return cls.from_index(int(value))
        try:
            return cls(value)
        except ValueError:
            raise LabelError(
                f"unknown label {value!r}; expected 'Violent' or 'NonViolent'"
            ) from None

    def onehot(self) -> np.ndarray:
        vec = np.zeros(2, dtype=np.float32)
        vec[self.index] = 1.0
        return vec


DEFAULT_LABEL_RULE: Mapping[str, Label] = {
    "Violence": Label.VIOLENT,
    "NonViolence": Label.NONVIOLENT,
}


@dataclass(frozen=True)
class VideoSample:
    id: str
    path: Path
    label: Label
    frame_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))
        object.__setattr__(self, "label", Label.parse(self.label))
        if self.frame_count is not None and self.frame_count < 1:
            raise InvalidInputError(f"{self.id}: frame_count must be >= 1")


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """15 resized RGB frames of one video, values in [0, 1]."""

    video_id: str
    frames: np.ndarray
    label_onehot: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        onehot = np.asarray(self.label_onehot, dtype=np.float32)
        if frames.shape != SEQUENCE_SHAPE:
            raise InvalidInputError(
                f"{self.video_id}: frames must have shape {SEQUENCE_SHAPE}, got {frames.shape}"
            )
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise InvalidInputError(f"{self.video_id}: frame values outside [0, 1]")
        if onehot.shape != (2,) or not np.isin(onehot, (0.0, 1.0)).all() or onehot.sum() != 1:
            raise InvalidInputError(f"{self.video_id}: label must be a length-2 one-hot vector")
        frames.setflags(write=False)
        onehot.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "label_onehot", onehot)

    @property
    def label(self) -> Label:
        return Label.from_index(int(np.argmax(self.label_onehot)))


@dataclass(frozen=True)
class DatasetSplit:
    """Train/validation/test membership for one split protocol.

    ``train`` and ``validation`` are disjoint; together they form the
    training pool (500 videos for the fraction split, 1600 for full).
    """

    train: list[VideoSample]
    validation: list[VideoSample]
    test: list[VideoSample]
    split_name: str
    seed: int
    scaled: bool = False
    stratified: bool = True

    @property
    def pool(self) -> list[VideoSample]:
        return list(self.train) + list(self.validation)

    def to_dict(self) -> dict:
        return {
            "split_name": self.split_name,
            "seed": self.seed,
            "scaled": self.scaled,
            "stratified": self.stratified,
            "sizes": {
                "train": len(self.train),
                "validation": len(self.validation),
                "test": len(self.test),
            },
            "train": [s.id for s in self.train],
            "validation": [s.id for s in self.validation],
            "test": [s.id for s in self.test],
        }

    @classmethod
    def from_dict(cls, data: dict, manifest: Sequence[VideoSample]) -> "DatasetSplit":
        by_id = {s.id: s for s in manifest}
        try:
            pick = lambda key: [by_id[i] for i in data[key]]  # noqa: E731
            return cls(
                train=pick("train"),
                validation=pick("validation"),
                test=pick("test"),
                split_name=data["split_name"],
                seed=int(data["seed"]),
                scaled=bool(data.get("scaled", False)),
                stratified=bool(data.get("stratified", True)),
            )
        except KeyError as exc:
            raise ConfigurationError(f"split references unknown video id {exc}") from exc


# --------------------------------------------------------------------------
# Manifest discovery


def _is_video(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in VIDEO_EXTENSIONS


def read_manifest_csv(path: str | os.PathLike) -> list[VideoSample]:
    path = Path(path)
    base = path.parent
    samples = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:3] != ["id", "path", "label"]:
            raise ConfigurationError(f"{path}: header must be 'id,path,label'")
        for row in reader:
            video_path = Path(row["path"])
            if not video_path.is_absolute():
                video_path = base / video_path
            try:
                label = Label(row["label"])
            except ValueError:
                raise LabelError(
                    f"{video_path}: label {row['label']!r} is not 'Violent' or 'NonViolent'"
                ) from None
            samples.append(VideoSample(row["id"], video_path, label))
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"{path}: duplicate ids in manifest")
    return samples


def write_manifest_csv(samples: Iterable[VideoSample], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "path", "label"])
        for s in samples:
            writer.writerow([s.id, str(s.path), s.label.value])
    return path


def load_manifest(
    root_path: str | os.PathLike,
    label_rule: Mapping[str, Label | str] | None = None,
) -> list[VideoSample]:
    """Discover labelled videos under ``root_path``.

    ``root_path`` may be a CSV manifest, a directory holding ``manifest.csv``,
    or a directory with one subdirectory per class. ``label_rule`` maps class
    subdirectory names to labels (default ``Violence``/``NonViolence``).
    Sample ids are the POSIX relative path of each file, so they are stable
    across machines. Results are sorted by id.
    """
    root = Path(root_path)
    if not root.exists():
        raise ConfigurationError(f"data root {root} does not exist")
    if root.is_file():
        return sorted(read_manifest_csv(root), key=lambda s: s.id)
    if (root / MANIFEST_NAME).is_file():
        return sorted(read_manifest_csv(root / MANIFEST_NAME), key=lambda s: s.id)

    rule = {k: Label.parse(v) for k, v in (label_rule or DEFAULT_LABEL_RULE).items()}
    samples, unmapped = [], []
    for path in sorted(root.rglob("*")):
        if not _is_video(path):
            continue
        rel = path.relative_to(root)
        top = rel.parts[0] if len(rel.parts) > 1 else None
        if top not in rule:
            unmapped.append(str(path))
            continue
        samples.append(VideoSample(rel.as_posix(), path, rule[top]))
    if unmapped:
        raise LabelError(
            "cannot assign a label to these videos (expected under one of "
            f"{sorted(rule)}): " + ", ".join(unmapped)
        )
    if not samples:
        warnings.warn(f"no videos found under {root}", stacklevel=2)
    return samples


# --------------------------------------------------------------------------
# Frame sampling and decoding


def sample_frame_indices(total_frames: int, target_count: int = N_FRAMES) -> list[int]:
    """Evenly spaced frame indices covering ``[0, total_frames - 1]``.

    Index ``i`` is ``i * (total_frames - 1) / (target_count - 1)`` rounded
    half up, computed in exact integer arithmetic. Clips shorter than
    ``target_count`` frames yield repeated indices.
    """
    if int(total_frames) != total_frames or total_frames <= 0:
        raise InvalidInputError(f"total_frames must be a positive integer, got {total_frames!r}")
    if int(target_count) != target_count or target_count < 2:
        raise InvalidInputError(f"target_count must be an integer >= 2, got {target_count!r}")
    span, steps = int(total_frames) - 1, int(target_count) - 1
    return [(2 * i * span + steps) // (2 * steps) for i in range(target_count)]


def count_frames(path: str | os.PathLike) -> int:
    """Count decodable frames by grabbing through the whole container."""
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            return 0
        n = 0
        while cap.grab():
            n += 1
        return n
    finally:
        cap.release()


def decode_and_resize(sample: VideoSample) -> FrameSequence:
    """Decode a video into a 15-frame, 100x100 RGB sequence scaled to [0, 1]."""
    path = Path(sample.path)
    if not path.is_file():
        raise DecodeError(sample.id, f"file not found: {path}")
    total = sample.frame_count or count_frames(path)
    if total <= 0:
        cap = cv2.VideoCapture(str(path))
        opened = cap.isOpened()
        cap.release()
        if not opened:
            raise DecodeError(sample.id, f"cannot open container {path}")
        raise InvalidInputError(f"{sample.id}: container has zero frames")

    wanted = sample_frame_indices(total)
    needed = set(wanted)
    grabbed: dict[int, np.ndarray] = {}
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise DecodeError(sample.id, f"cannot open container {path}")
        for idx in range(max(wanted) + 1):
            if not cap.grab():
                raise DecodeError(sample.id, f"stream ended at frame {idx}, expected {total}")
            if idx in needed:
                ok, frame = cap.retrieve()
                if not ok or frame is None:
                    raise DecodeError(sample.id, f"failed to decode frame {idx}")
                grabbed[idx] = _resize_frame(frame)
    finally:
        cap.release()

    frames = np.stack([grabbed[i] for i in wanted])
    return FrameSequence(sample.id, frames, sample.label.onehot())


def _resize_frame(bgr: np.ndarray) -> np.ndarray:
    if bgr.ndim == 2:
        bgr = cv2.cvtColor(bgr, cv2.COLOR_GRAY2BGR)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    small = cv2.resize(rgb, (FRAME_SIZE, FRAME_SIZE), interpolation=cv2.INTER_LINEAR)
    return small.astype(np.float32) / 255.0


# --------------------------------------------------------------------------
# Tensor cache

CACHE_MAGIC = b"VIDBENCH-TENSOR"  # 15 bytes + 1-byte version = 16-byte preamble
_SHAPE_STRUCT = struct.Struct("<4I")


def write_tensor(path: str | os.PathLike, frames: np.ndarray) -> Path:
    """Write a sequence tensor: 16-byte magic+version, 4 x uint32 shape, float32 data."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.shape != SEQUENCE_SHAPE:
        raise InvalidInputError(f"cache tensors must have shape {SEQUENCE_SHAPE}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CACHE_MAGIC + bytes([PIPELINE_VERSION]))
        fh.write(_SHAPE_STRUCT.pack(*frames.shape))
        fh.write(frames.tobytes())
    os.replace(tmp, path)
    return path


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with Path(path).open("rb") as fh:
        preamble = fh.read(16)
        if preamble[:15] != CACHE_MAGIC:
            raise ConfigurationError(f"{path}: not a vidbench tensor file")
        if preamble[15] != PIPELINE_VERSION:
            raise ConfigurationError(
                f"{path}: pipeline version {preamble[15]} != {PIPELINE_VERSION}"
            )
        shape = _SHAPE_STRUCT.unpack(fh.read(_SHAPE_STRUCT.size))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if shape != SEQUENCE_SHAPE or data.size != np.prod(shape):
        raise ConfigurationError(f"{path}: corrupt tensor (shape header {shape})")
    return data.reshape(shape).astype(np.float32)


class TensorCache:
    """On-disk cache of decoded sequences keyed by (video id, pipeline version)."""

    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)

    def _stem(self, video_id: str) -> str:
        digest = hashlib.sha1(video_id.encode("utf-8")).hexdigest()[:24]
        return f"{digest}.v{PIPELINE_VERSION}"

    def path_for(self, video_id: str) -> Path:
        return self.directory / f"{self._stem(video_id)}.f32"

    def params_path_for(self, video_id: str) -> Path:
        return self.directory / f"{self._stem(video_id)}.aug.json"

    def __contains__(self, video_id: str) -> bool:
        return self.path_for(video_id).is_file()

    def get(self, sample: VideoSample) -> FrameSequence | None:
        path = self.path_for(sample.id)
        if not path.is_file():
            return None
        return FrameSequence(sample.id, read_tensor(path), sample.label.onehot())

    def put(self, seq: FrameSequence) -> Path:
        return write_tensor(self.path_for(seq.video_id), seq.frames)

    def put_params(self, video_id: str, params) -> Path:
        path = self.params_path_for(video_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(params.to_dict(), sort_keys=True) + "\n")
        return path


@dataclass
class FrameLoader:
    """Decode samples in parallel, preserving input order, via an optional cache."""

    cache: TensorCache | None = None
    workers: int = field(default_factory=lambda: min(4, os.cpu_count() or 1))

    def load_one(self, sample: VideoSample) -> FrameSequence:
        if self.cache is not None:
            hit = self.cache.get(sample)
            if hit is not None:
                return hit
        seq = decode_and_resize(sample)
        if self.cache is not None:
            self.cache.put(seq)
        return seq

    def load(self, samples: Sequence[VideoSample]) -> list[FrameSequence]:
        if self.workers <= 1 or len(samples) <= 1:
            return [self.load_one(s) for s in samples]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(self.load_one, samples))

    def arrays(self, samples: Sequence[VideoSample]) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(X, y)`` with ``y`` as 0/1 class indices."""
        seqs = self.load(samples)
        return stack_sequences(seqs)


def stack_sequences(seqs: Sequence[FrameSequence]) -> tuple[np.ndarray, np.ndarray]:
    if not seqs:
        return np.zeros((0, *SEQUENCE_SHAPE), np.float32), np.zeros(0, np.int64)
    X = np.stack([s.frames for s in seqs])
    y = np.array([int(np.argmax(s.label_onehot)) for s in seqs], dtype=np.int64)
    return X, y


# --------------------------------------------------------------------------
# Splitting


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _allocate(class_sizes: Mapping[Label, int], n: int) -> dict[Label, int]:
    """Split ``n`` across classes proportionally (largest remainder)."""
    total = sum(class_sizes.values())
    if n > total:
        raise SplitSizeError(f"cannot draw {n} samples from {total}")
    if total == 0:
        return {c: 0 for c in class_sizes}
    exact = {c: n * k / total for c, k in class_sizes.items()}
    alloc = {c: int(np.floor(v)) for c, v in exact.items()}
    order = sorted(class_sizes, key=lambda c: (-(exact[c] - alloc[c]), c.index))
    for c in order[: n - sum(alloc.values())]:
        alloc[c] += 1
    return alloc


def _split_sizes(n_total: int, scale: bool) -> tuple[int, int, int, bool]:
    if n_total >= CANONICAL_TOTAL:
        return TEST_SIZE, FRACTION_SIZE, VALIDATION_SIZE, False
    if not scale:
        raise SplitSizeError(
            f"manifest has {n_total} videos; canonical splits need {CANONICAL_TOTAL} "
            "(pass scale=True for proportionally scaled splits)"
        )
    test = _round_half_up(n_total * TEST_SIZE / CANONICAL_TOTAL)
    fraction = _round_half_up(n_total * FRACTION_SIZE / CANONICAL_TOTAL)
    validation = _round_half_up(fraction * VALIDATION_SIZE / FRACTION_SIZE)
    return test, fraction, validation, True


def split_dataset(
    manifest: Sequence[VideoSample],
    split_name: str,
    seed: int,
    *,
    validation: bool = True,
    scale: bool = False,
) -> DatasetSplit:
    """Stratified, seeded train/validation/test split.

    The 400-video test set is held out first and is identical for both split
    names under one seed. ``"full"`` trains on everything that remains;
    ``"fraction"`` draws a 500-video pool from the remainder (always a subset
    of the full pool) and, when ``validation`` is true, carves 125 of those
    out as a validation set.
    """
    if split_name not in ("fraction", "full"):
        raise InvalidInputError(f"split_name must be 'fraction' or 'full', got {split_name!r}")
    ids = [s.id for s in manifest]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("manifest ids must be unique")

    n_test, n_fraction, n_val, scaled = _split_sizes(len(manifest), scale)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    by_class: dict[Label, list[VideoSample]] = {}
    for label in (Label.NONVIOLENT, Label.VIOLENT):
        members = sorted((s for s in manifest if s.label is label), key=lambda s: s.id)
        by_class[label] = [members[i] for i in rng.permutation(len(members))]

    test_alloc = _allocate({c: len(v) for c, v in by_class.items()}, n_test)
    test = [s for c in by_class for s in by_class[c][: test_alloc[c]]]
    remaining = {c: v[test_alloc[c]:] for c, v in by_class.items()}

    if split_name == "full":
        train = [s for c in remaining for s in remaining[c]]
        val: list[VideoSample] = []
    else:
        pool_alloc = _allocate({c: len(v) for c, v in remaining.items()}, n_fraction)
        pool = {c: v[: pool_alloc[c]] for c, v in remaining.items()}
        val_alloc = _allocate(pool_alloc, n_val if validation else 0)
        val = [s for c in pool for s in pool[c][: val_alloc[c]]]
        train = [s for c in pool for s in pool[c][val_alloc[c]:]]

    if scaled:
        logger.info("scaled split for %d videos: test=%d fraction=%d validation=%d",
                    len(manifest), n_test, n_fraction, n_val)
    return DatasetSplit(
        train=sorted(train, key=lambda s: s.id),
        validation=sorted(val, key=lambda s: s.id),
        test=sorted(test, key=lambda s: s.id),
        split_name=split_name,
        seed=int(seed),
        scaled=scaled,
    )


# --------------------------------------------------------------------------
# sklearn transformer


class VideoFrameExtractor(TransformerMixin, BaseEstimator):
    """Map video file paths to a ``(n, 15, 100, 100, 3)`` float32 array.

    Stateless; ``fit`` only validates its input. Accepts paths or
    ``VideoSample`` objects.
    """

    def __init__(self, cache_dir=None, n_jobs=1):
        self.cache_dir = cache_dir
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        self._to_samples(X)
        return self

    def transform(self, X):
        samples = self._to_samples(X)
        cache = TensorCache(self.cache_dir) if self.cache_dir is not None else None
        X_out, _ = FrameLoader(cache=cache, workers=self.n_jobs).arrays(samples)
        return X_out

    @staticmethod
    def _to_samples(X) -> list[VideoSample]:
        samples = []
        for item in X:
            if isinstance(item, VideoSample):
                samples.append(item)
            else:
                path = Path(item)
                # label is irrelevant for feature extraction
                samples.append(VideoSample(path.as_posix(), path, Label.NONVIOLENT))
        return samples

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        tags.input_tags.string = True
        tags.requires_fit = False
        return tags
