"""Builders for the four video classifiers and checkpoint I/O.

All models take ``(B, 15, 100, 100, 3)`` inputs in [0, 1] and return
``(B, 2)`` softmax probabilities with class 1 = Violent.

Backbone freezing counts layers over ``backbone.layers`` in definition order,
excluding the ``InputLayer``; weightless layers (activations, adds, pads)
count like any other, matching the usual ``base.layers[-n:]`` idiom.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import keras
import numpy as np
from keras import layers

from vidbench._validation import SEQUENCE_SHAPE, check_sequence_batch
from vidbench.exceptions import SpecError, WeightsMissingError

logger = logging.getLogger(__name__)

WEIGHTS_FILE = "model.weights.h5"
SPEC_FILE = "spec.json"


class Family(str, enum.Enum):
    CNN3D = "cnn3d"
    CNN2D_BILSTM = "cnn2d_bilstm"
    INCEPTIONV3_BILSTM = "inceptionv3_bilstm"
    MOBILENETV2_BILSTM = "mobilenetv2_bilstm"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "cnn3d": cls.CNN3D, "3dcnn": cls.CNN3D,
            "cnn2dbilstm": cls.CNN2D_BILSTM,
            "inceptionv3bilstm": cls.INCEPTIONV3_BILSTM,
            "mobilenetv2bilstm": cls.MOBILENETV2_BILSTM,
        }
        try:
            return cls(key)
        except ValueError:
            pass
        if key.replace("_", "") in aliases:
            return aliases[key.replace("_", "")]
        raise SpecError(f"unknown model family {value!r}; choose from "
                        + ", ".join(f.value for f in cls))

    @property
    def has_backbone(self) -> bool:
        return self in (Family.INCEPTIONV3_BILSTM, Family.MOBILENETV2_BILSTM)


ALL_FAMILIES = tuple(Family)

# Head defaults; the three recurrent families share one head topology.
_HYBRID_HEAD = (128, 64)
_DEFAULTS = {
    Family.CNN3D: dict(dense_units=(256,), dropout_rate=0.5, l2_strength=1e-3),
    Family.CNN2D_BILSTM: dict(dense_units=_HYBRID_HEAD, dropout_rate=0.5, l2_strength=0.0),
    Family.INCEPTIONV3_BILSTM: dict(dense_units=_HYBRID_HEAD, dropout_rate=0.5, l2_strength=0.0),
    Family.MOBILENETV2_BILSTM: dict(dense_units=_HYBRID_HEAD, dropout_rate=0.5, l2_strength=0.0),
}


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    num_classes: int = 2
    trainable_tail_layers: int = 80
    recurrent_units: int = 64
    dense_units: tuple[int, ...] | None = None
    dropout_rate: float | None = None
    l2_strength: float | None = None
    weights: str | None = "imagenet"

    def __post_init__(self):
        family = Family.parse(self.family)
        object.__setattr__(self, "family", family)
        for name, value in _DEFAULTS[family].items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        object.__setattr__(self, "dense_units", tuple(int(u) for u in self.dense_units))
        if self.num_classes != 2:
            raise SpecError("num_classes must be 2")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise SpecError(f"dropout_rate must be in [0, 1], got {self.dropout_rate}")
        if self.l2_strength < 0:
            raise SpecError("l2_strength must be >= 0")
        if self.trainable_tail_layers < 0:
            raise SpecError("trainable_tail_layers must be >= 0")
        if self.recurrent_units < 1 or any(u < 1 for u in self.dense_units):
            raise SpecError("layer widths must be positive")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["family"] = self.family.value
        out["dense_units"] = list(self.dense_units)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelSpec":
        data = self.to_dict()
        data.update(changes)
        return ModelSpec.from_dict(data)


@dataclass
class ModelHandle:
    spec: ModelSpec
    model: keras.Model
    backbone: keras.Model | None = None
    weights_source: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return int(self.model.count_params())

    @property
    def trainable_parameter_count(self) -> int:
        return int(sum(np.prod(w.shape) for w in self.model.trainable_weights))

    @property
    def dropout_rate(self) -> float:
        rates = [l.rate for l in self.model.layers if isinstance(l, layers.Dropout)]
        return float(rates[0]) if rates else 0.0

    def layer_types(self) -> list[str]:
        return [type(l).__name__ for l in self.model.layers]

    def backbone_layers(self) -> list:
        if self.backbone is None:
            return []
        return _countable_layers(self.backbone)


def _countable_layers(model: keras.Model) -> list:
    return [l for l in model.layers if not isinstance(l, keras.layers.InputLayer)]


def _check_family(spec: ModelSpec, allowed) -> None:
    if spec.family not in allowed:
        names = ", ".join(f.value for f in allowed)
        raise SpecError(f"builder expects family in {{{names}}}, got {spec.family.value}")


def _regularizer(spec: ModelSpec):
    return keras.regularizers.L2(spec.l2_strength) if spec.l2_strength > 0 else None


def _seed_init(seed: int | None) -> None:
    if seed is not None:
        keras.utils.set_random_seed(int(seed))


def build_cnn3d(spec: ModelSpec, seed: int | None = None) -> ModelHandle:
    _check_family(spec, {Family.CNN3D})
    _seed_init(seed)
    reg = _regularizer(spec)
    conv = dict(kernel_size=(3, 3, 3), activation="relu", padding="same",
                kernel_regularizer=reg)
    stack = [
        layers.Conv3D(32, name="conv3d_1", **conv),
        layers.MaxPooling3D(pool_size=(2, 2, 2), name="pool3d_1"),
        layers.BatchNormalization(name="bn_1"),
        layers.Conv3D(64, name="conv3d_2", **conv),
        layers.MaxPooling3D(pool_size=(2, 2, 2), name="pool3d_2"),
        layers.BatchNormalization(name="bn_2"),
        layers.Flatten(name="flatten"),
    ]
    for i, units in enumerate(spec.dense_units, start=1):
        stack += [
            layers.Dense(units, activation="relu", kernel_regularizer=reg, name=f"fc_{i}"),
            layers.Dropout(spec.dropout_rate, name=f"dropout_{i}"),
        ]
    stack.append(layers.Dense(spec.num_classes, activation="softmax", name="output"))
    model = keras.Sequential([keras.Input(SEQUENCE_SHAPE)] + stack, name="cnn3d")
    return ModelHandle(spec, model)


class FrameWise(layers.TimeDistributed):
    """``TimeDistributed`` that folds time into the batch axis.

    Keras unrolls a static time axis into one call per step, which puts 15
    copies of a backbone in the training graph. Reshaping to ``(B*T, ...)``
    calls the wrapped layer once; batch-norm then sees every frame of the
    batch together.
    """

    def call(self, inputs, training=None, mask=None):
        shape = keras.ops.shape(inputs)
        frames = keras.ops.reshape(inputs, (-1, *inputs.shape[2:]))
        kwargs = {"training": training} if self.layer._call_has_training_arg else {}
        out = self.layer(frames, **kwargs)
        return keras.ops.reshape(out, (shape[0], shape[1], *out.shape[1:]))


def _recurrent_head(x, spec: ModelSpec):
    reg = _regularizer(spec)
    x = layers.Bidirectional(layers.LSTM(spec.recurrent_units), name="bilstm")(x)
    x = layers.Dropout(spec.dropout_rate, name="dropout_rnn")(x)
    for i, units in enumerate(spec.dense_units, start=1):
        x = layers.Dense(units, activation="relu", kernel_regularizer=reg, name=f"fc_{i}")(x)
        x = layers.Dropout(spec.dropout_rate, name=f"dropout_{i}")(x)
    return layers.Dense(spec.num_classes, activation="softmax", name="output")(x)


def build_cnn2d_bilstm(spec: ModelSpec, seed: int | None = None) -> ModelHandle:
    _check_family(spec, {Family.CNN2D_BILSTM})
    _seed_init(seed)
    td = FrameWise
    inputs = keras.Input(SEQUENCE_SHAPE, name="frames")
    x = td(layers.Conv2D(64, 3, padding="same", activation="relu"), name="conv2d_1")(inputs)
    x = td(layers.BatchNormalization(), name="bn_1")(x)
    x = td(layers.MaxPooling2D(2), name="pool2d_1")(x)
    x = td(layers.Conv2D(128, 3, padding="same", activation="relu"), name="conv2d_2")(x)
    x = td(layers.BatchNormalization(), name="bn_2")(x)
    x = td(layers.MaxPooling2D(2), name="pool2d_2")(x)
    x = td(layers.Flatten(), name="flatten")(x)
    model = keras.Model(inputs, _recurrent_head(x, spec), name="cnn2d_bilstm")
    return ModelHandle(spec, model)


_BACKBONES = {
    Family.INCEPTIONV3_BILSTM: (
        keras.applications.InceptionV3,
        "inception_v3_weights_tf_dim_ordering_tf_kernels_notop.h5",
    ),
    Family.MOBILENETV2_BILSTM: (
        keras.applications.MobileNetV2,
        "mobilenet_v2_weights_tf_dim_ordering_tf_kernels_1.0_224_no_top.h5",
    ),
}


def _keras_cache_dir() -> Path:
    return Path(os.environ.get("KERAS_HOME", Path.home() / ".keras")) / "models"


def _make_backbone(spec: ModelSpec, allow_download: bool, allow_random_init: bool):
    factory, cached_name = _BACKBONES[spec.family]
    kwargs = dict(include_top=False, input_shape=SEQUENCE_SHAPE[1:], pooling=None)
    weights = spec.weights
    if weights is None:
        return factory(weights=None, **kwargs), None

    if weights == "imagenet":
        local = _keras_cache_dir() / cached_name
        if not local.is_file() and not allow_download:
            problem = f"ImageNet weights not cached at {local} and download is disabled"
        else:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", UserWarning)
                    return factory(weights="imagenet", **kwargs), "imagenet"
            except Exception as exc:  # keras raises a bare Exception on fetch failure
                problem = f"could not obtain ImageNet weights: {exc}"
    else:
        if Path(weights).is_file():
            return factory(weights=str(weights), **kwargs), str(weights)
        problem = f"weights file {weights} not found"

    if not allow_random_init:
        raise WeightsMissingError(problem + " (pass allow_random_init=True to fall back)")
    warnings.warn(problem + "; falling back to random initialisation", stacklevel=3)
    return factory(weights=None, **kwargs), None


def freeze_backbone(backbone: keras.Model, trainable_tail_layers: int) -> None:
    countable = _countable_layers(backbone)
    if trainable_tail_layers > len(countable):
        raise SpecError(
            f"trainable_tail_layers={trainable_tail_layers} exceeds backbone depth "
            f"{len(countable)}"
        )
    backbone.trainable = True
    cut = len(countable) - trainable_tail_layers
    for i, layer in enumerate(countable):
        layer.trainable = i >= cut


def build_backbone_bilstm(
    spec: ModelSpec,
    seed: int | None = None,
    *,
    allow_download: bool = True,
    allow_random_init: bool = False,
) -> ModelHandle:
    """Per-frame pretrained CNN features -> BiLSTM -> dense head.

    The backbone sees inputs rescaled from [0, 1] to [-1, 1], the value range
    both InceptionV3 and MobileNetV2 were trained on. Both accept 100x100
    inputs once their classification heads are removed (InceptionV3 needs at
    least 75x75).
    """
    _check_family(spec, set(_BACKBONES))
    _seed_init(seed)
    backbone, source = _make_backbone(spec, allow_download, allow_random_init)
    freeze_backbone(backbone, spec.trainable_tail_layers)

    td = FrameWise
    inputs = keras.Input(SEQUENCE_SHAPE, name="frames")
    x = td(layers.Rescaling(2.0, offset=-1.0), name="preprocess")(inputs)
    x = td(backbone, name="backbone")(x)
    x = td(layers.GlobalAveragePooling2D(), name="gap")(x)
    model = keras.Model(inputs, _recurrent_head(x, spec), name=spec.family.value)
    return ModelHandle(spec, model, backbone=backbone, weights_source=source)


def build_model(spec: ModelSpec, seed: int | None = None, **backbone_kwargs) -> ModelHandle:
    if spec.family is Family.CNN3D:
        return build_cnn3d(spec, seed)
    if spec.family is Family.CNN2D_BILSTM:
        return build_cnn2d_bilstm(spec, seed)
    return build_backbone_bilstm(spec, seed, **backbone_kwargs)


def forward(handle: ModelHandle, batch, batch_size: int = 8) -> np.ndarray:
    """Inference-mode class probabilities, ``(B, 2)``."""
    X = check_sequence_batch(batch)
    if len(X) == 0:
        return np.zeros((0, handle.spec.num_classes), np.float32)
    outs = [
        keras.ops.convert_to_numpy(handle.model(X[i:i + batch_size], training=False))
        for i in range(0, len(X), batch_size)
    ]
    return np.concatenate(outs).astype(np.float32)


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(handle: ModelHandle, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    handle.model.save_weights(directory / WEIGHTS_FILE)
    (directory / SPEC_FILE).write_text(json.dumps(handle.spec.to_dict(), indent=2) + "\n")
    return directory


def load_checkpoint(directory: str | os.PathLike) -> ModelHandle:
    directory = Path(directory)
    spec = ModelSpec.from_dict(json.loads((directory / SPEC_FILE).read_text()))
    # trained weights overwrite everything, so skip the pretrained download
    handle = build_model(spec.replace(weights=None)) if spec.family.has_backbone \
        else build_model(spec)
    handle.spec = spec
    handle.model.load_weights(directory / WEIGHTS_FILE)
    handle.weights_source = str(directory)
    return handle
