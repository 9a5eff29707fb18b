"""scikit-learn wrapper around :func:`andmask.optim.train`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .data import EnvDataset
from .model import Architecture, forward
from .optim import TrainConfig, train


class AndMaskClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier trained with environment-aware gradient aggregation.

    ``fit`` takes an optional ``groups`` array naming the environment of each
    row. Without it every row belongs to one environment, which makes any
    mask rule a no-op (a single gradient always agrees with itself).

    Parameters mirror :class:`andmask.optim.TrainConfig` plus the network
    shape. After fitting, ``history_`` holds one metrics dict per epoch.
    """

    def __init__(self, hidden_layers=3, hidden_units=256, activation_slope=0.01, mask_rule="and",
                 tau=1.0, rescale=True, optimizer="adam", learning_rate=1e-2, batch_size=128,
                 epochs=40, l1_coeff=0.0, l2_coeff=1e-4, dropout_rate=0.0, batching="auto",
                 early_stop=False, random_state=0):
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.activation_slope = activation_slope
        self.mask_rule = mask_rule
        self.tau = tau
        self.rescale = rescale
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.l1_coeff = l1_coeff
        self.l2_coeff = l2_coeff
        self.dropout_rate = dropout_rate
        self.batching = batching
        self.early_stop = early_stop
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        if self.random_state is None or isinstance(self.random_state, np.random.Generator):
            raise ValueError("random_state must be an integer seed")
        return TrainConfig(
            optimizer=self.optimizer, mask_rule=self.mask_rule, tau=self.tau, rescale=self.rescale,
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            seed=int(self.random_state), l1_coeff=self.l1_coeff, l2_coeff=self.l2_coeff,
            dropout_rate=self.dropout_rate, batching=self.batching, early_stop=self.early_stop,
        )

    def fit(self, X, y, groups=None):
        X, y = validate_data(self, X, y, dtype=np.float64, ensure_min_samples=2)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if groups is None:
            env = np.zeros(len(y), dtype=np.intp)
        else:
            groups = np.asarray(groups)
            if groups.shape != (len(y),):
                raise ValueError("groups must have one entry per sample")
            _, env = np.unique(groups, return_inverse=True)
        cfg = self._train_config()
        # small inputs: shrink the batch so each environment still yields one step
        counts = np.bincount(env)
        cfg.batch_size = int(min(cfg.batch_size, counts.min() * len(counts)))
        arch = Architecture(X.shape[1], self.hidden_layers, self.hidden_units, self.activation_slope,
                            output_classes=len(self.classes_))
        result = train(arch, EnvDataset(X, y_enc, env), cfg)
        self.params_ = result.params
        self.history_ = result.metrics
        self.stopped_early_ = result.stopped_early
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return forward(self.params_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
