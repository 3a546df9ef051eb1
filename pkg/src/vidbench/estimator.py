"""scikit-learn compatible classifier over frame-sequence batches."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from vidbench._validation import check_binary_labels, check_sequence_batch
from vidbench.data_ingest import Label
from vidbench.model_zoo import Family, ModelSpec, build_model, forward
from vidbench.seeding import derive_seed
from vidbench.training import default_config, fit_arrays


class VideoClassifier(ClassifierMixin, BaseEstimator):
    """Violent / non-violent classifier on ``(n, 15, 100, 100, 3)`` inputs.

    Hyperparameters left as ``None`` fall back to the per-family defaults
    of :class:`~vidbench.model_zoo.ModelSpec` and
    :func:`~vidbench.training.default_config`.

    Labels may be 0/1 or the strings ``"NonViolent"``/``"Violent"``;
    ``predict`` answers in the same vocabulary it was fitted with.

    Examples
    --------
    >>> clf = VideoClassifier(family="cnn3d", epochs=5)       # doctest: +SKIP
    >>> clf.fit(X_train, y_train).score(X_test, y_test)       # doctest: +SKIP
    """

    def __init__(
        self,
        family="mobilenetv2_bilstm",
        *,
        trainable_tail_layers=80,
        recurrent_units=64,
        dense_units=None,
        dropout_rate=None,
        l2_strength=None,
        weights="imagenet",
        allow_random_init=False,
        optimizer=None,
        initial_lr=None,
        batch_size=None,
        epochs=None,
        schedule=None,
        augment=False,
        run_dir=None,
        random_state=0,
    ):
        self.family = family
        self.trainable_tail_layers = trainable_tail_layers
        self.recurrent_units = recurrent_units
        self.dense_units = dense_units
        self.dropout_rate = dropout_rate
        self.l2_strength = l2_strength
        self.weights = weights
        self.allow_random_init = allow_random_init
        self.optimizer = optimizer
        self.initial_lr = initial_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.schedule = schedule
        self.augment = augment
        self.run_dir = run_dir
        self.random_state = random_state

    def _model_spec(self) -> ModelSpec:
        return ModelSpec(
            Family.parse(self.family),
            trainable_tail_layers=self.trainable_tail_layers,
            recurrent_units=self.recurrent_units,
            dense_units=self.dense_units,
            dropout_rate=self.dropout_rate,
            l2_strength=self.l2_strength,
            weights=self.weights,
        )

    def fit(self, X, y, X_val=None, y_val=None, sample_ids=None):
        X = check_sequence_batch(X)
        y_arr = np.asarray(y)
        self._string_labels = y_arr.dtype.kind in "USO"
        y_idx = check_binary_labels(y_arr)
        if self._string_labels:
            self.classes_ = np.array([Label.NONVIOLENT.value, Label.VIOLENT.value])
        else:
            self.classes_ = np.array([0, 1])

        spec = self._model_spec()
        seed = int(self.random_state or 0)
        backbone_kwargs = ({"allow_random_init": self.allow_random_init}
                           if spec.family.has_backbone else {})
        self.handle_ = build_model(spec, seed=derive_seed(seed, f"init:{spec.family.value}"),
                                   **backbone_kwargs)
        self.training_config_ = default_config(spec.family).override(
            optimizer=self.optimizer, initial_lr=self.initial_lr, batch_size=self.batch_size,
            epochs=self.epochs, schedule=self.schedule, seed=seed,
        )
        _, self.history_ = fit_arrays(
            self.handle_, X, y_idx, self.training_config_,
            X_val=X_val, y_val=y_val, augment=self.augment, ids=sample_ids,
            run_dir=self.run_dir,
        )
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "handle_")
        return forward(self.handle_, X)

    def predict(self, X):
        check_is_fitted(self, "handle_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        tags.input_tags.three_d_array = True
        tags.non_deterministic = False
        return tags
