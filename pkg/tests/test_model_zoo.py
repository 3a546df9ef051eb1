import json

import keras
import numpy as np
import pytest
import tensorflow as tf

from vidbench.exceptions import ShapeError, SpecError, WeightsMissingError
from vidbench.model_zoo import (
    Family,
    ModelSpec,
    build_backbone_bilstm,
    build_cnn2d_bilstm,
    build_cnn3d,
    build_model,
    FrameWise,
    forward,
    load_checkpoint,
    save_checkpoint,
)

CNN3D_LAYERS = ["Conv3D", "MaxPooling3D", "BatchNormalization",
                "Conv3D", "MaxPooling3D", "BatchNormalization",
                "Flatten", "Dense", "Dropout", "Dense"]

rng = np.random.default_rng(0)
BATCH = rng.random((2, 15, 100, 100, 3), dtype=np.float32)


@pytest.fixture(scope="module")
def handles():
    return {f: build_model(ModelSpec(f, weights=None), seed=1) for f in Family}


@pytest.mark.parametrize("family", list(Family))
def test_output_shape_and_normalisation(handles, family):
    out = forward(handles[family], BATCH)
    assert out.shape == (2, 2)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)
    assert ((out >= 0) & (out <= 1)).all()
    assert handles[family].model.output_shape[-1] == 2
    h = handles[family]
    assert 0 < h.trainable_parameter_count <= h.parameter_count


def test_cnn3d_architecture(handles):
    h = handles[Family.CNN3D]
    assert h.layer_types() == CNN3D_LAYERS
    convs = [l for l in h.model.layers if isinstance(l, keras.layers.Conv3D)]
    assert [c.filters for c in convs] == [32, 64]
    for c in convs:
        assert c.kernel_size == (3, 3, 3)
        assert c.padding == "same"
        assert c.activation.__name__ == "relu"
        assert c.kernel_regularizer is not None
    pools = [l for l in h.model.layers if isinstance(l, keras.layers.MaxPooling3D)]
    assert all(p.pool_size == (2, 2, 2) for p in pools)
    dense = [l for l in h.model.layers if isinstance(l, keras.layers.Dense)]
    assert dense[0].units == 256 and dense[0].activation.__name__ == "relu"
    assert dense[0].kernel_regularizer is not None
    assert dense[-1].activation.__name__ == "softmax"
    assert h.dropout_rate == 0.5


def test_cnn2d_bilstm_architecture(handles):
    m = handles[Family.CNN2D_BILSTM].model
    convs = [l.layer for l in m.layers
             if isinstance(l, keras.layers.TimeDistributed)
             and isinstance(l.layer, keras.layers.Conv2D)]
    assert [c.filters for c in convs] == [64, 128]
    inner = [type(l.layer).__name__ for l in m.layers
             if isinstance(l, keras.layers.TimeDistributed)]
    assert inner == ["Conv2D", "BatchNormalization", "MaxPooling2D",
                     "Conv2D", "BatchNormalization", "MaxPooling2D", "Flatten"]
    bilstm = m.get_layer("bilstm")
    assert isinstance(bilstm, keras.layers.Bidirectional)
    assert bilstm.input.shape[1] == 15
    dense = [l for l in m.layers if isinstance(l, keras.layers.Dense)]
    assert len(dense) == 3  # two hidden + softmax


def _head_signature(model):
    return [(type(l).__name__, getattr(l, "units", None), getattr(l, "rate", None))
            for l in model.layers[model.layers.index(model.get_layer("bilstm")):]]


def test_recurrent_families_share_head(handles):
    sigs = {f: _head_signature(handles[f].model)
            for f in (Family.CNN2D_BILSTM, Family.INCEPTIONV3_BILSTM, Family.MOBILENETV2_BILSTM)}
    assert len({json.dumps(s) for s in sigs.values()}) == 1


@pytest.mark.parametrize("family", [Family.INCEPTIONV3_BILSTM, Family.MOBILENETV2_BILSTM])
def test_last_80_layers_trainable(handles, family):
    layers = handles[family].backbone_layers()
    flags = [l.trainable for l in layers]
    assert flags[-80:] == [True] * 80
    assert not any(flags[:-80])


def test_freeze_all():
    h = build_model(ModelSpec(Family.MOBILENETV2_BILSTM, weights=None, trainable_tail_layers=0))
    assert not any(l.trainable for l in h.backbone_layers())
    backbone_ids = {id(w) for w in h.backbone.weights}
    assert not any(id(w) in backbone_ids for w in h.model.trainable_weights)
    assert h.trainable_parameter_count > 0


def test_tail_larger_than_backbone():
    with pytest.raises(SpecError):
        build_model(ModelSpec(Family.MOBILENETV2_BILSTM, weights=None, trainable_tail_layers=999))


def test_gradient_flow_and_frozen_untouched():
    h = build_model(ModelSpec(Family.MOBILENETV2_BILSTM, weights=None), seed=2)
    model = h.model
    frozen = [l for l in h.backbone_layers() if not l.trainable]
    before = {id(w): np.array(w.numpy()) for l in frozen for w in l.weights}
    y = np.eye(2, dtype=np.float32)[[0, 1]]
    with tf.GradientTape() as tape:
        loss = keras.losses.categorical_crossentropy(y, model(BATCH, training=True))
        loss = tf.reduce_mean(loss)
    grads = tape.gradient(loss, model.trainable_weights)
    by_layer = {}
    for w, g in zip(model.trainable_weights, grads):
        layer = w.path.rsplit("/", 1)[0]
        by_layer[layer] = by_layer.get(layer, 0.0) + float(tf.norm(g)) if g is not None else 0.0
    assert by_layer and all(v > 0 for v in by_layer.values()), by_layer
    opt = keras.optimizers.RMSprop(1e-3)
    opt.apply_gradients(zip(grads, model.trainable_weights))
    for l in frozen:
        for w in l.weights:
            assert np.array_equal(before[id(w)], w.numpy())


@pytest.mark.parametrize("builder,family", [
    (build_cnn3d, Family.CNN2D_BILSTM),
    (build_cnn2d_bilstm, Family.CNN3D),
    (build_backbone_bilstm, Family.CNN3D),
])
def test_wrong_family(builder, family):
    with pytest.raises(SpecError):
        builder(ModelSpec(family))


def test_spec_validation():
    with pytest.raises(SpecError):
        ModelSpec(Family.CNN3D, num_classes=3)
    with pytest.raises(SpecError):
        ModelSpec(Family.CNN3D, dropout_rate=1.2)
    with pytest.raises(SpecError):
        ModelSpec("resnet")
    spec = ModelSpec("mobilenetv2_bilstm")
    assert ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    assert ModelSpec(Family.CNN3D).dense_units == (256,)


def test_weights_missing(tmp_path, monkeypatch):
    monkeypatch.setenv("KERAS_HOME", str(tmp_path))
    spec = ModelSpec(Family.MOBILENETV2_BILSTM)
    with pytest.raises(WeightsMissingError):
        build_backbone_bilstm(spec, allow_download=False)
    with pytest.warns(UserWarning, match="random"):
        h = build_backbone_bilstm(spec, allow_download=False, allow_random_init=True)
    assert h.weights_source is None
    assert sum(l.trainable for l in h.backbone_layers()) == 80


def test_local_weights_file(tmp_path):
    base = keras.applications.MobileNetV2(include_top=False, weights=None,
                                          input_shape=(100, 100, 3))
    path = tmp_path / "mnv2.weights.h5"
    base.save_weights(path)
    h = build_backbone_bilstm(ModelSpec(Family.MOBILENETV2_BILSTM, weights=str(path)))
    assert h.weights_source == str(path)
    np.testing.assert_array_equal(h.backbone.weights[0].numpy(), base.weights[0].numpy())


class TestForward:
    def test_shape_error_names_dims(self, handles):
        with pytest.raises(ShapeError, match="15, 100, 100, 3"):
            forward(handles[Family.CNN3D], np.zeros((1, 10, 100, 100, 3), np.float32))

    def test_zero_input(self, handles):
        out = forward(handles[Family.CNN3D], np.zeros((1, 15, 100, 100, 3), np.float32))
        assert out.shape == (1, 2) and abs(out.sum() - 1) < 1e-5

    def test_identical_rows_and_repeatable(self, handles):
        h = handles[Family.MOBILENETV2_BILSTM]
        x = np.repeat(BATCH[:1], 3, axis=0)
        a = forward(h, x)
        assert np.array_equal(a[0], a[1]) and np.array_equal(a[1], a[2])
        assert np.array_equal(forward(h, x), a)


def test_checkpoint_roundtrip(tmp_path, handles):
    h = handles[Family.MOBILENETV2_BILSTM]
    save_checkpoint(h, tmp_path / "epoch_0")
    spec = json.loads((tmp_path / "epoch_0" / "spec.json").read_text())
    assert spec["family"] == "mobilenetv2_bilstm"
    again = load_checkpoint(tmp_path / "epoch_0")
    assert np.array_equal(forward(again, BATCH), forward(h, BATCH))


def test_framewise_matches_time_distributed():
    conv = keras.layers.Conv2D(4, 3, padding="same")
    x = BATCH[:, :, :20, :20]
    ours = FrameWise(conv)(x)
    stock = keras.layers.TimeDistributed(conv)(x)
    assert ours.shape == (2, 15, 20, 20, 4)
    np.testing.assert_allclose(ours.numpy(), stock.numpy(), atol=1e-6)
