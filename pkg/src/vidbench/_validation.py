"""Input validation helpers used by the estimators and the functional API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from vidbench.exceptions import InvalidInputError, ShapeError

N_FRAMES = 15
FRAME_SIZE = 100
N_CHANNELS = 3
SEQUENCE_SHAPE = (N_FRAMES, FRAME_SIZE, FRAME_SIZE, N_CHANNELS)
FRAME_SHAPE = SEQUENCE_SHAPE[1:]


def check_frame(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.shape != FRAME_SHAPE:
        raise ShapeError(f"expected frame of shape {FRAME_SHAPE}, got {frame.shape}")
    return frame


def check_sequence_batch(X, *, check_range: bool = True) -> np.ndarray:
    """Validate a batch of frame sequences and return it as float32.

    Accepts anything ``np.asarray`` understands, including a list of
    ``FrameSequence`` frames. Raises ``ShapeError`` naming the expected and
    received dimensions.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False,
                    ensure_min_samples=0)
    if X.ndim != 5 or X.shape[1:] != SEQUENCE_SHAPE:
        raise ShapeError(
            f"expected batch of shape (B, {', '.join(map(str, SEQUENCE_SHAPE))}), "
            f"got {X.shape}"
        )
    if check_range and X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise InvalidInputError("pixel values must lie in [0, 1]")
    return X


def check_binary_labels(y) -> np.ndarray:
    """Coerce labels to an int array of 0/1 class indices.

    Accepts integer indices, one-hot rows, or the class names used in
    manifests ("Violent"/"NonViolent").
    """
    from vidbench.data_ingest import Label

    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != 2:
            raise ShapeError(f"one-hot labels must have 2 columns, got {y.shape[1]}")
        return np.argmax(y, axis=1).astype(np.int64)
    if y.dtype.kind in "US" or y.dtype == object:
        try:
            return np.array([Label.parse(v).index for v in y], dtype=np.int64)
        except (KeyError, ValueError) as exc:
            raise InvalidInputError(str(exc)) from exc
    y = y.astype(np.int64)
    if y.size and not np.isin(y, (0, 1)).all():
        raise InvalidInputError("labels must be 0 (NonViolent) or 1 (Violent)")
    return y
