"""Desk-scale acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is printed in the pytest
terminal summary under "acceptance criteria".
"""

import json
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import keras
import numpy as np
import pytest
import tensorflow as tf

from conftest import ACCEPTANCE_LINES, fake_manifest, synthetic_sequences
from vidbench.augmentation import (
    AugmentationParams,
    BRIGHTNESS_RANGE,
    SIGMA_RANGE,
    ZOOM_RANGE,
    apply_gaussian_blur,
    apply_zoom,
    augment_frames,
    gaussian_kernel,
)
from vidbench.data_ingest import sample_frame_indices, split_dataset
from vidbench.evaluation import build_report, confusion_matrix, metrics_from_confusion, Prediction
from vidbench.experiment import ExperimentConfig, run_experiment
from vidbench.model_zoo import Family, ModelSpec, build_model, forward
from vidbench.training import (
    ExponentialDecay,
    ReduceOnPlateau,
    TrainingConfig,
    TrainingHistory,
    fit_arrays,
    plateau_lr,
)


def record(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 ------------------------------------------------------------------------

def brute_force_indices(n):
    # round half up of i*(n-1)/14 with exact rationals
    return [math.floor(Fraction(i * (n - 1), 14) + Fraction(1, 2)) for i in range(15)]


def test_01_frame_sampler_oracle():
    bad = [n for n in range(1, 301)
           if sample_frame_indices(n) != brute_force_indices(n)
           or sample_frame_indices(n)[0] != 0 or sample_frame_indices(n)[-1] != n - 1]
    record(1, "frame sampler matches brute force for N in 1..300", not bad,
           f"mismatches at {bad[:5]}" if bad else "300/300 exact")


# 2 ------------------------------------------------------------------------

def test_02_split_fidelity():
    manifest = fake_manifest(1000)
    frac = split_dataset(manifest, "fraction", seed=11)
    full = split_dataset(manifest, "full", seed=11)
    again = split_dataset(manifest, "fraction", seed=11)
    ids = lambda xs: {s.id for s in xs}
    checks = {
        "test=400": len(frac.test) == len(full.test) == 400,
        "fraction=500": len(frac.pool) == 500,
        "validation=125 inside": len(frac.validation) == 125 and len(frac.train) == 375,
        "full=1600": len(full.train) == 1600 and not full.validation,
        "disjoint": not (ids(frac.pool) & ids(frac.test)) and not (ids(full.train) & ids(full.test))
                    and not (ids(frac.train) & ids(frac.validation)),
        "shared test": ids(frac.test) == ids(full.test),
        "deterministic": again.to_dict() == frac.to_dict(),
    }
    failed = [k for k, v in checks.items() if not v]
    record(2, "split sizes 400/500(125)/1600, disjoint, deterministic", not failed,
           f"failed {failed}" if failed else "")


# 3 ------------------------------------------------------------------------

def test_03_augmentation_properties():
    rng = np.random.default_rng(2024)
    problems = []
    for k in range(1000):
        frame = rng.random((100, 100, 3), dtype=np.float32)
        p = AugmentationParams(rng.uniform(*ZOOM_RANGE), rng.uniform(*BRIGHTNESS_RANGE),
                               rng.uniform(*SIGMA_RANGE))
        out = augment_frames(frame[None], p)[0]
        if out.shape != (100, 100, 3) or out.min() < 0 or out.max() > 1:
            problems.append(f"range/shape at {k}")
        kern = gaussian_kernel(p.sigma)
        if abs(kern.sum() - 1) > 1e-6 or abs(np.outer(kern, kern).sum() - 1) > 1e-6:
            problems.append(f"kernel sum at {k}")
        if np.abs(apply_zoom(frame, 1.0) - frame).max() > 1e-6:
            problems.append(f"zoom identity at {k}")
        c = np.full((100, 100, 3), rng.random(), np.float32)
        if np.abs(apply_gaussian_blur(c, p.sigma) - c).max() > 1e-6:
            problems.append(f"constant blur at {k}")
    record(3, "augmentation shape, range, kernel, identity, blur invariance (1000 frames)",
           not problems, "; ".join(problems[:5]))


# 4 ------------------------------------------------------------------------

CNN3D_LAYERS = ["Conv3D", "MaxPooling3D", "BatchNormalization",
                "Conv3D", "MaxPooling3D", "BatchNormalization",
                "Flatten", "Dense", "Dropout", "Dense"]


def test_04_model_shapes():
    batch = np.random.default_rng(0).random((2, 15, 100, 100, 3), dtype=np.float32)
    problems = []
    for fam in Family:
        kwargs = {"allow_download": False, "allow_random_init": True} if fam.has_backbone else {}
        with pytest.warns() if fam.has_backbone else _null():
            h = build_model(ModelSpec(fam), seed=0, **kwargs)
        out = forward(h, batch)
        if out.shape != (2, 2) or np.abs(out.sum(axis=1) - 1).max() > 1e-5:
            problems.append(f"{fam.value}: {out.shape}")
        if fam is Family.CNN3D and h.layer_types() != CNN3D_LAYERS:
            problems.append(f"cnn3d layers {h.layer_types()}")
        keras.backend.clear_session()
    record(4, "all families map (2,15,100,100,3) to normalised (2,2); Cnn3d layer list",
           not problems, "; ".join(problems))


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# 5 ------------------------------------------------------------------------

def test_05_freezing():
    rng = np.random.default_rng(1)
    X = rng.random((2, 15, 100, 100, 3), dtype=np.float32)
    Y = np.eye(2, dtype=np.float32)
    problems = []
    for fam in (Family.INCEPTIONV3_BILSTM, Family.MOBILENETV2_BILSTM):
        with pytest.warns(UserWarning):
            h = build_model(ModelSpec(fam), seed=0, allow_download=False, allow_random_init=True)
        flags = [l.trainable for l in h.backbone_layers()]
        if flags[-80:] != [True] * 80 or any(flags[:-80]):
            problems.append(f"{fam.value}: {sum(flags)} trainable of {len(flags)}")
        frozen = [w for l in h.backbone_layers() if not l.trainable for w in l.weights]
        before = [w.numpy().copy() for w in frozen]
        tail = [w for l in h.backbone_layers() if l.trainable for w in l.trainable_weights]
        tail_before = [w.numpy().copy() for w in tail]
        opt = keras.optimizers.RMSprop(1e-3)
        with tf.GradientTape() as tape:
            loss = tf.reduce_mean(keras.losses.categorical_crossentropy(Y, h.model(X, training=True)))
        grads = tape.gradient(loss, h.model.trainable_weights)
        opt.apply_gradients(zip(grads, h.model.trainable_weights))
        if not all(np.array_equal(a, w.numpy()) for a, w in zip(before, frozen)):
            problems.append(f"{fam.value}: frozen weights changed")
        if all(np.array_equal(a, w.numpy()) for a, w in zip(tail_before, tail)):
            problems.append(f"{fam.value}: trainable tail did not move")
        keras.backend.clear_session()
    record(5, "last 80 backbone layers trainable; frozen weights bit-identical after a step",
           not problems, "; ".join(problems) or "random-init backbones")


# 6 ------------------------------------------------------------------------

def plateau_trace(losses, lr0, factor, patience, min_lr):
    used, lr = [], lr0
    for n in range(1, len(losses) + 1):
        used.append(lr)
        lr = plateau_lr(TrainingHistory.from_val_losses(losses[:n]), lr, factor, patience, min_lr)
    return used


def test_06_schedule_traces():
    X, y = synthetic_sequences(2)
    config = TrainingConfig("sgd_momentum", 1e-3, batch_size=2, epochs=10,
                            schedule=ExponentialDecay(0.8))
    _, hist = fit_arrays(build_model(ModelSpec(Family.CNN3D), seed=0), X, y, config)
    expected = [1e-3 * 0.8 ** e for e in range(10)]
    problems = [] if hist.learning_rates == expected else [f"exponential {hist.learning_rates}"]

    scripted = [
        ([1.0, 0.9, 0.8, 0.7, 0.6], 0.5, 2, 1e-6, [1e-3] * 5),
        ([0.8] * 6, 0.5, 2, 1e-6, [1e-3, 1e-3, 1e-3, 1e-3 * 0.5, 1e-3 * 0.5, 1e-3 * 0.5 * 0.5]),
        ([1.0, 0.95, 0.96, 0.94995, 0.97, 0.98, 0.5, 0.6, 0.7], 0.1, 2, 2e-5,
         [1e-3, 1e-3, 1e-3, 1e-3, 1e-3 * 0.1, 1e-3 * 0.1, 2e-5, 2e-5, 2e-5]),
    ]
    for k, (losses, factor, patience, min_lr, want) in enumerate(scripted):
        got = plateau_trace(losses, 1e-3, factor, patience, min_lr)
        if got != want:
            problems.append(f"plateau curve {k}: {got}")
    record(6, "exponential decay exact for 10 epochs; 3 plateau traces exact", not problems,
           "; ".join(problems))


# 7 ------------------------------------------------------------------------

def brute_force_metrics(pred, true):
    tn = sum(1 for p, t in zip(pred, true) if p == 0 and t == 0)
    fp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 0)
    fn = sum(1 for p, t in zip(pred, true) if p == 0 and t == 1)
    tp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 1)

    def f1(tp, fp, fn):
        return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)

    return [[tn, fp], [fn, tp]], (tp + tn) / len(pred), f1(tn, fn, fp), f1(tp, fp, fn)


def test_07_metric_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    mismatched = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        pred, true = rng.integers(0, 2, n), rng.integers(0, 2, n)
        cm, acc, f0, f1 = brute_force_metrics(pred.tolist(), true.tolist())
        got_cm = confusion_matrix(pred, true)
        mismatched += got_cm.tolist() != cm
        got = metrics_from_confusion(got_cm)
        worst = max(worst, *(abs(a - b) for a, b in zip(got, (acc, f0, f1))))
    preds = [Prediction(str(i), i % 2, i % 2 if i >= 23 else 1 - i % 2, (0.5, 0.5))
             for i in range(400)]
    report = build_report("mobilenetv2_bilstm", "full", preds)
    ok = mismatched == 0 and worst <= 1e-12 and report.accuracy == 0.9425 and report.n_test == 400
    record(7, "metrics match brute force over 1000 vectors; 377/400 gives 0.9425", ok,
           f"max error {worst:.1e}, confusion mismatches {mismatched}, "
           f"377/400 -> {report.accuracy}")


# 8 ------------------------------------------------------------------------

def _overfit(family_value):
    """Train on the 8 synthetic clips; runs in a child process."""
    family = Family(family_value)
    X, y = synthetic_sequences(8)

    def reached(handle, rec):
        reached.accuracy = float(np.mean(np.argmax(forward(handle, X), axis=1) == y))
        return reached.accuracy >= 0.95

    reached.accuracy = 0.0
    config = TrainingConfig("rmsprop" if family is Family.CNN2D_BILSTM else "sgd_momentum",
                            1e-3, batch_size=2, epochs=50, schedule=ReduceOnPlateau(), seed=0)
    _, hist = fit_arrays(build_model(ModelSpec(family), seed=0), X, y, config, stop_when=reached)
    return reached.accuracy, len(hist)


@pytest.mark.slow
@pytest.mark.parametrize("family", [Family.CNN3D, Family.CNN2D_BILSTM])
def test_08_overfit_smoke(family):
    # a fresh process keeps the full-size networks' memory out of this one
    t0 = time.perf_counter()
    with ProcessPoolExecutor(1, mp_context=multiprocessing.get_context("spawn")) as pool:
        accuracy, epochs = pool.submit(_overfit, family.value).result()
    elapsed = time.perf_counter() - t0
    ok = accuracy >= 0.95 and epochs <= 50 and elapsed < 600
    record(8, f"{family.value} overfits 8 synthetic videos", ok,
           f"train accuracy {accuracy:.3f} after {epochs} epochs in {elapsed:.0f}s")


# 9 ------------------------------------------------------------------------

@pytest.mark.slow
def test_09_mini_grid(mini_dataset, tmp_path):
    config = ExperimentConfig(
        data_root=str(mini_dataset), families=["cnn3d", "mobilenetv2_bilstm"],
        output_root=str(tmp_path), scale_splits=True, allow_download=False,
        allow_random_init=True, seed=5, training={"all": {"epochs": 1, "batch_size": 4}},
    )
    result = run_experiment(config)
    metrics = sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("metrics.json"))
    summary = json.loads((Path(tmp_path) / "ablation_summary.json").read_text())
    uplifts = [v["uplift"] for v in summary["per_family"].values()]
    per_family_ok = all(v["uplift"] == v["acc_full"] - v["acc_fraction"]
                        for v in summary["per_family"].values())
    ok = (result.ok and len(metrics) == 4 and len(uplifts) == 2 and per_family_ok
          and summary["mean_uplift"] == float(np.mean(uplifts)))
    record(9, "2x2 mini grid writes 4 metrics.json and a consistent ablation summary", ok,
           f"{len(metrics)} reports, mean uplift {summary['mean_uplift']:+.4f}")
