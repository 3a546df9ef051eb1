"""Zoom, brightness and Gaussian-blur augmentation of frame sequences.

One set of parameters is drawn per video and applied to all of its frames,
in the order zoom -> brightness -> blur.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from vidbench._validation import FRAME_SIZE, check_frame, check_sequence_batch
from vidbench.data_ingest import FrameSequence
from vidbench.exceptions import InvalidParameterError
from vidbench.seeding import derive_seed

ZOOM_RANGE = (1.0, 1.5)
BRIGHTNESS_RANGE = (0.8, 1.5)
SIGMA_RANGE = (0.5, 1.5)


def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise InvalidParameterError(f"{name}={value!r} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class AugmentationParams:
    zoom: float
    brightness: float
    sigma: float
    seed: int | None = None

    def __post_init__(self):
        _check_range("zoom", self.zoom, *ZOOM_RANGE)
        _check_range("brightness", self.brightness, *BRIGHTNESS_RANGE)
        _check_range("sigma", self.sigma, *SIGMA_RANGE)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentationParams":
        return cls(float(data["zoom"]), float(data["brightness"]), float(data["sigma"]),
                   data.get("seed"))


def sample_params(rng_seed: int) -> AugmentationParams:
    rng = np.random.default_rng(rng_seed)
    zoom, brightness, sigma = (float(rng.uniform(lo, hi))
                               for lo, hi in (ZOOM_RANGE, BRIGHTNESS_RANGE, SIGMA_RANGE))
    return AugmentationParams(zoom, brightness, sigma, int(rng_seed))


def params_for_video(seed: int, video_id: str) -> AugmentationParams:
    """Per-video parameters derived from the experiment seed."""
    return sample_params(derive_seed(seed, f"augment:{video_id}"))


def zoom_crop_side(factor: float, size: int = FRAME_SIZE) -> int:
    return int(math.floor(size / factor + 0.5))


def apply_zoom(frame, factor: float) -> np.ndarray:
    """Centre-crop a square of side ``round(100 / factor)`` and resize back to 100x100."""
    if factor < 1.0:
        raise InvalidParameterError(f"zoom factor must be >= 1.0, got {factor!r}")
    frame = check_frame(frame)
    side = zoom_crop_side(factor)
    if side == FRAME_SIZE:
        return frame.copy()
    top = (FRAME_SIZE - side) // 2
    crop = np.ascontiguousarray(frame[top:top + side, top:top + side])
    out = cv2.resize(crop, (FRAME_SIZE, FRAME_SIZE), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


def apply_brightness(frame, factor: float) -> np.ndarray:
    if factor <= 0:
        raise InvalidParameterError(f"brightness factor must be > 0, got {factor!r}")
    frame = np.asarray(frame, dtype=np.float32)
    return np.clip(frame * np.float32(factor), 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps with radius ``ceil(3 * sigma)``."""
    if sigma <= 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma!r}")
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_gaussian_blur(frame, sigma: float) -> np.ndarray:
    """Separable per-channel Gaussian blur with reflect padding."""
    kernel = gaussian_kernel(sigma)
    r = len(kernel) // 2
    img = np.asarray(frame, dtype=np.float64)
    h, w = img.shape[:2]
    # numpy "reflect" mirrors about the edge pixel without repeating it
    padded = np.pad(img, ((r, r), (0, 0)) + ((0, 0),) * (img.ndim - 2), mode="reflect")
    rows = sum(kernel[i] * padded[i:i + h] for i in range(len(kernel)))
    padded = np.pad(rows, ((0, 0), (r, r)) + ((0, 0),) * (img.ndim - 2), mode="reflect")
    out = sum(kernel[i] * padded[:, i:i + w] for i in range(len(kernel)))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_frames(frames: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Augment a ``(15, 100, 100, 3)`` array with one parameter set."""
    out = np.empty_like(np.asarray(frames, dtype=np.float32))
    for t, frame in enumerate(frames):
        frame = apply_zoom(frame, params.zoom)
        frame = apply_brightness(frame, params.brightness)
        out[t] = apply_gaussian_blur(frame, params.sigma)
    return out


def augment_sequence(seq: FrameSequence, params: AugmentationParams) -> FrameSequence:
    return FrameSequence(seq.video_id, augment_frames(seq.frames, params), seq.label_onehot)


class SequenceAugmenter(TransformerMixin, BaseEstimator):
    """Apply per-sample random augmentation to a batch of sequences.

    Sample ``i`` uses parameters derived from ``(random_state, i)``, or from
    ``(random_state, ids[i])`` when ``ids`` are given to ``transform``. Only
    use this on training data; it does not distinguish fit from predict.
    """

    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit(self, X, y=None):
        check_sequence_batch(X)
        return self

    def transform(self, X, ids=None):
        X = check_sequence_batch(X)
        if ids is None:
            ids = [str(i) for i in range(len(X))]
        self.params_ = [params_for_video(self.random_state, str(v)) for v in ids]
        return np.stack([augment_frames(x, p) for x, p in zip(X, self.params_)]) if len(X) else X

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        tags.input_tags.three_d_array = True
        tags.requires_fit = False
        return tags
