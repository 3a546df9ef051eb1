"""Test-set prediction, confusion matrices, accuracy/F1 and report files.

Class convention: index 1 = Violent (positive), 0 = NonViolent. Confusion
matrices are indexed ``[truth, prediction]``, i.e. ``[[TN, FP], [FN, TP]]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vidbench.data_ingest import FrameSequence, Label
from vidbench.exceptions import InvalidInputError, ShapeError
from vidbench.model_zoo import ModelHandle, forward

METRICS_FILE = "metrics.json"
CONFUSION_CSV = "confusion.csv"
CONFUSION_PNG = "confusion.png"
PREDICTIONS_CSV = "predictions.csv"


@dataclass(frozen=True)
class Prediction:
    id: str
    true_label: int
    predicted_label: int
    probability: tuple[float, float]


@dataclass
class EvaluationReport:
    model_family: str
    split_name: str
    accuracy: float
    f1_class0: float
    f1_class1: float
    confusion: np.ndarray
    per_video: list[Prediction] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def n_test(self) -> int:
        return int(np.asarray(self.confusion).sum())

    @property
    def false_positives(self) -> int:
        """Nonviolent clips flagged as violent."""
        return int(self.confusion[0][1])

    @property
    def false_negatives(self) -> int:
        return int(self.confusion[1][0])

    def metrics_dict(self) -> dict:
        out = {
            "family": self.model_family,
            "split": self.split_name,
            "accuracy": self.accuracy,
            "f1": {"class0": self.f1_class0, "class1": self.f1_class1},
            "confusion": np.asarray(self.confusion).astype(int).tolist(),
            "n_test": self.n_test,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
        }
        out.update(self.provenance)
        return out

    @classmethod
    def load(cls, directory) -> "EvaluationReport":
        directory = Path(directory)
        data = json.loads((directory / METRICS_FILE).read_text())
        per_video = []
        pred_path = directory / PREDICTIONS_CSV
        if pred_path.is_file():
            with pred_path.open(newline="") as fh:
                for row in csv.DictReader(fh):
                    per_video.append(Prediction(
                        row["id"], int(row["true_label"]), int(row["predicted_label"]),
                        (float(row["prob_nonviolent"]), float(row["prob_violent"]))))
        known = {"family", "split", "accuracy", "f1", "confusion", "n_test",
                 "false_positives", "false_negatives"}
        return cls(data["family"], data["split"], data["accuracy"], data["f1"]["class0"],
                   data["f1"]["class1"], np.array(data["confusion"], dtype=np.int64),
                   per_video, {k: v for k, v in data.items() if k not in known})


def _as_labels(values, name) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional")
    if arr.size and (arr.dtype.kind not in "iub" or not np.isin(arr, (0, 1)).all()):
        raise InvalidInputError(f"{name} must contain only 0/1 labels")
    return arr.astype(np.int64)


def confusion_matrix(preds, truths) -> np.ndarray:
    """2x2 counts indexed ``[truth, prediction]``."""
    preds, truths = _as_labels(preds, "preds"), _as_labels(truths, "truths")
    if len(preds) != len(truths):
        raise InvalidInputError(f"length mismatch: {len(preds)} preds vs {len(truths)} truths")
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def _f1(tp, fp, fn) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def metrics_from_confusion(cm) -> tuple[float, float, float]:
    """Return ``(accuracy, f1_class0, f1_class1)``; undefined F1 is 0."""
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise InvalidInputError(f"confusion matrix must be 2x2, got {cm.shape}")
    if (cm < 0).any():
        raise InvalidInputError("confusion matrix has negative entries")
    total = cm.sum()
    if total == 0:
        raise InvalidInputError("confusion matrix is all zeros")
    (tn, fp), (fn, tp) = cm.tolist()
    accuracy = (tn + tp) / total
    return float(accuracy), _f1(tn, fn, fp), _f1(tp, fp, fn)


def predict_all(handle: ModelHandle, test: Sequence[FrameSequence],
                batch_size: int = 8) -> list[Prediction]:
    if not test:
        return []
    X = np.stack([s.frames for s in test])
    if X.shape[1:] != (15, 100, 100, 3):
        raise ShapeError(f"expected sequences of shape (15, 100, 100, 3), got {X.shape[1:]}")
    proba = forward(handle, X, batch_size=batch_size)
    return [
        Prediction(s.video_id, int(np.argmax(s.label_onehot)), int(np.argmax(p)),
                   (float(p[0]), float(p[1])))
        for s, p in zip(test, proba)
    ]


def build_report(family: str, split_name: str, predictions: Sequence[Prediction],
                 provenance: dict | None = None) -> EvaluationReport:
    cm = confusion_matrix([p.predicted_label for p in predictions],
                          [p.true_label for p in predictions])
    accuracy, f1_0, f1_1 = metrics_from_confusion(cm)
    return EvaluationReport(family, split_name, accuracy, f1_0, f1_1, cm,
                            list(predictions), dict(provenance or {}))


def evaluate(handle: ModelHandle, test: Sequence[FrameSequence], split_name: str,
             provenance: dict | None = None) -> EvaluationReport:
    return build_report(handle.spec.family.value, split_name, predict_all(handle, test),
                        provenance)


def plot_confusion(cm, path, title: str | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm)
    names = [Label.NONVIOLENT.value, Label.VIOLENT.value]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > cm.max() / 2 else "black")
    ax.set_xticks([0, 1], names)
    ax.set_yticks([0, 1], names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def emit_report(report: EvaluationReport, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / name
             for name in (METRICS_FILE, CONFUSION_CSV, CONFUSION_PNG, PREDICTIONS_CSV)}

    paths[METRICS_FILE].write_text(json.dumps(report.metrics_dict(), indent=2) + "\n")

    with paths[CONFUSION_CSV].open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["truth", "pred", "count"])
        for (t, p), count in np.ndenumerate(np.asarray(report.confusion)):
            writer.writerow([t, p, int(count)])

    with paths[PREDICTIONS_CSV].open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "true_label", "predicted_label", "prob_nonviolent", "prob_violent"])
        for p in report.per_video:
            writer.writerow([p.id, p.true_label, p.predicted_label,
                             repr(p.probability[0]), repr(p.probability[1])])

    plot_confusion(report.confusion, paths[CONFUSION_PNG],
                   f"{report.model_family} ({report.split_name})")
    return paths
