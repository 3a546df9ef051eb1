import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

from pathlib import Path  # noqa: E402

import cv2  # noqa: E402
import numpy as np  # noqa: E402
import pytest  # noqa: E402

from vidbench.data_ingest import Label, VideoSample  # noqa: E402


def write_video(path, n_frames=20, size=(64, 48), moving=False, value=255, fps=30):
    """Write an MJPG AVI: black background with a bright square.

    ``moving`` slides the square left to right; otherwise it stays put.
    ``value=0`` gives an all-black clip.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    w, h = size
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, (w, h))
    side = max(4, h // 4)
    for t in range(n_frames):
        frame = np.zeros((h, w, 3), np.uint8)
        if value:
            x0 = int((w - side) * t / max(1, n_frames - 1)) if moving else (w - side) // 2
            y0 = (h - side) // 2
            frame[y0:y0 + side, x0:x0 + side] = value
        writer.write(frame)
    writer.release()
    return path


def synthetic_sequences(n=8):
    """``n`` sequences alternating static square (label 0) / moving square (label 1)."""
    X = np.zeros((n, 15, 100, 100, 3), np.float32)
    y = np.array([i % 2 for i in range(n)])
    for k in range(n):
        if y[k]:
            for t in range(15):
                X[k, t, 40:60, 5 * t:5 * t + 20] = 1.0
        else:
            X[k, :, 40:60, 40:60] = 1.0
    return X, y


def fake_manifest(n_per_class=1000):
    samples = []
    for label, prefix in ((Label.VIOLENT, "Violence/V"), (Label.NONVIOLENT, "NonViolence/NV")):
        for i in range(n_per_class):
            vid = f"{prefix}_{i}.mp4"
            samples.append(VideoSample(vid, Path("/nonexistent") / vid, label))
    return samples


@pytest.fixture(scope="module", autouse=True)
def _release_graphs():
    """Drop Keras graphs and models between modules to bound memory."""
    yield
    import gc

    import keras

    keras.backend.clear_session(free_memory=True)
    gc.collect()


@pytest.fixture
def video_dir(tmp_path):
    """A 20-video dataset in the Violence/NonViolence directory layout."""
    root = tmp_path / "data"
    for i in range(10):
        write_video(root / "Violence" / f"V_{i}.avi", n_frames=16 + i, moving=True)
        write_video(root / "NonViolence" / f"NV_{i}.avi", n_frames=16 + i, moving=False)
    return root


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """40 small synthetic videos, 20 per class."""
    root = tmp_path_factory.mktemp("mini") / "data"
    for i in range(20):
        write_video(root / "Violence" / f"V_{i:02d}.avi", n_frames=18, moving=True)
        write_video(root / "NonViolence" / f"NV_{i:02d}.avi", n_frames=18, moving=False)
    return root


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
