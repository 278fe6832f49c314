"""scikit-learn style front ends for the two-stage pipeline.

These wrap the functional core so the method composes with the wider
ecosystem (get_params/set_params, clone, cross-validation). The heavy lifting
stays in :mod:`scclab.train` and :mod:`scclab.graph`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import graph as graph_mod
from . import net, train
from .datasets import SyntheticDataset


def _dataset_from_arrays(x, y, num_classes):
    n = x.shape[0]
    return SyntheticDataset(
        features=x,
        web_labels=y,
        true_labels=y.copy(),
        ids=np.arange(n, dtype=np.int64),
        num_classes=num_classes,
    )


class SigmoidMlpClassifier(BaseEstimator, ClassifierMixin):
    """One-hidden-layer classifier with independent per-class sigmoid heads.

    This is the pretraining stage as a standalone estimator: SGD with linear
    warmup and cosine decay, optional class reweighting, and a choice of
    confidence-friendly regularizers.

    Note that ``predict_proba`` returns the raw per-class sigmoid outputs:
    classes are scored independently and rows do not sum to 1.
    """

    def __init__(self, hidden_units=64, epochs=30, batch_size=32,
                 learning_rate=0.1, warmup_epochs=10, momentum=0.9,
                 weight_decay=1e-4, regularizer="vanilla", mixup_alpha=0.2,
                 dropout_rate=0.5, mc_passes=50, ensemble_size=5,
                 entropy_weight=0.1, smoothing_epsilon=0.1,
                 class_reweighting=True, random_state=0):
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_epochs = warmup_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.regularizer = regularizer
        self.mixup_alpha = mixup_alpha
        self.dropout_rate = dropout_rate
        self.mc_passes = mc_passes
        self.ensemble_size = ensemble_size
        self.entropy_weight = entropy_weight
        self.smoothing_epsilon = smoothing_epsilon
        self.class_reweighting = class_reweighting
        self.random_state = random_state

    def _config(self):
        return train.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            initial_lr=self.learning_rate,
            warmup_epochs=self.warmup_epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            regularizer=self.regularizer,
            mixup_alpha=self.mixup_alpha,
            dropout_rate=self.dropout_rate,
            mc_passes=self.mc_passes,
            ensemble_size=self.ensemble_size,
            class_reweighting=self.class_reweighting,
            hidden_units=self.hidden_units,
            entropy_weight=self.entropy_weight,
            smoothing_epsilon=self.smoothing_epsilon,
            seed=self.random_state,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        ds = _dataset_from_arrays(X, y_idx, len(self.classes_))
        result = train.pretrain(ds, self._config())
        self.models_ = result.models
        self.log_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        if len(self.models_) == 1:
            return net.forward(self.models_[0], X)
        return np.mean([net.forward(m, X) for m in self.models_], axis=0)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]

    def hidden_features(self, X):
        """Hidden-layer representations (averaged over ensemble members)."""
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        if len(self.models_) == 1:
            return net.hidden_features(self.models_[0], X)
        return np.mean([net.hidden_features(m, X) for m in self.models_], axis=0)


class SccClassifier(BaseEstimator, ClassifierMixin):
    """Two-stage noise-robust classifier.

    ``fit`` pretrains on the given (possibly noisy) labels, extracts self
    labels and per-sample confidence from the pretrained model (optionally
    smoothing both over a cosine k-NN feature graph), then finetunes from the
    pretrained weights with the confidence-balanced loss. Set
    ``constant_confidence`` to replace the per-sample confidence with a
    constant (the ablation baseline).

    As with :class:`SigmoidMlpClassifier`, ``predict_proba`` rows are
    independent sigmoid scores and do not sum to 1.
    """

    def __init__(self, hidden_units=64, pretrain_epochs=30, finetune_epochs=30,
                 batch_size=32, pretrain_lr=0.1, finetune_lr=0.05,
                 warmup_epochs=10, momentum=0.9, weight_decay=1e-4,
                 regularizer="vanilla", finetune_regularizer="vanilla",
                 mixup_alpha=0.2, dropout_rate=0.5, mc_passes=50,
                 ensemble_size=5, entropy_weight=0.1, smoothing_epsilon=0.1,
                 class_reweighting=True, graph_smoothing=False, n_neighbors=10,
                 self_loop_weight=0.5, constant_confidence=None, random_state=0):
        self.hidden_units = hidden_units
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.pretrain_lr = pretrain_lr
        self.finetune_lr = finetune_lr
        self.warmup_epochs = warmup_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.regularizer = regularizer
        self.finetune_regularizer = finetune_regularizer
        self.mixup_alpha = mixup_alpha
        self.dropout_rate = dropout_rate
        self.mc_passes = mc_passes
        self.ensemble_size = ensemble_size
        self.entropy_weight = entropy_weight
        self.smoothing_epsilon = smoothing_epsilon
        self.class_reweighting = class_reweighting
        self.graph_smoothing = graph_smoothing
        self.n_neighbors = n_neighbors
        self.self_loop_weight = self_loop_weight
        self.constant_confidence = constant_confidence
        self.random_state = random_state

    def _config(self, stage):
        common = dict(
            batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            mixup_alpha=self.mixup_alpha,
            dropout_rate=self.dropout_rate,
            mc_passes=self.mc_passes,
            ensemble_size=self.ensemble_size,
            class_reweighting=self.class_reweighting,
            hidden_units=self.hidden_units,
            entropy_weight=self.entropy_weight,
            smoothing_epsilon=self.smoothing_epsilon,
            seed=self.random_state,
        )
        if stage == "pretrain":
            return train.TrainConfig(
                epochs=self.pretrain_epochs, initial_lr=self.pretrain_lr,
                regularizer=self.regularizer, **common,
            )
        return train.TrainConfig(
            epochs=self.finetune_epochs, initial_lr=self.finetune_lr,
            regularizer=self.finetune_regularizer, **common,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        ds = _dataset_from_arrays(X, y_idx, len(self.classes_))

        pretrain_result = train.pretrain(ds, self._config("pretrain"))
        artifacts = train.extract(ds, pretrain_result.models, self._config("pretrain"))
        if self.graph_smoothing:
            artifacts = graph_mod.smooth_artifacts(
                artifacts, k=self.n_neighbors, lam=self.self_loop_weight
            )
        if self.constant_confidence is None:
            finetune_result = train.finetune(ds, artifacts, self._config("finetune"))
        else:
            finetune_result = train.finetune_constant(
                ds, artifacts, self.constant_confidence, self._config("finetune")
            )

        self.pretrained_models_ = pretrain_result.models
        self.self_labels_ = artifacts.self_labels
        self.confidence_ = artifacts.scc
        self.model_ = finetune_result.model
        self.log_ = finetune_result.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return net.forward(self.model_, X)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]


class GraphLabelSmoother(BaseEstimator):
    """Transductive label smoother over a cosine k-NN feature graph.

    ``fit(X)`` builds the graph on the n feature rows; ``transform(P)``
    smooths an (n, C) soft-label matrix over it. This is transductive: the
    matrix passed to ``transform`` must describe the same n samples the graph
    was built on.
    """

    def __init__(self, n_neighbors=10, self_loop_weight=0.5):
        self.n_neighbors = n_neighbors
        self.self_loop_weight = self_loop_weight

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.graph_ = graph_mod.build_knn(
            X, k=self.n_neighbors, lam=self.self_loop_weight
        )
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, label_matrix):
        check_is_fitted(self, "graph_")
        label_matrix = check_array(label_matrix, dtype=np.float64)
        return graph_mod.gba_smooth(self.graph_, label_matrix)
