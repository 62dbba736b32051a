"""scikit-learn style wrapper around :func:`lpa_lab.train.train`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import parse_method
from .data import Dataset
from .net import forward_full, log_softmax
from .train import TrainConfig, train

_PERTURB_METHODS = ("lpa", "lpa_lowrank", "lpl")


class LPAClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier trained with class-level activation perturbation.

    ``method`` is any name accepted by the config loader; the perturbation
    parameters are ignored by methods that do not use them.  ``layer=None``
    perturbs the penultimate layer.
    """

    def __init__(
        self,
        method="lpa",
        mode="balanced",
        epsilon=0.1,
        delta_epsilon=0.0,
        tau=None,
        beta=0.7,
        layer=None,
        steps=3,
        rank=None,
        hidden_sizes=(64, 64),
        epochs=30,
        batch_size=128,
        learning_rate=0.1,
        momentum=0.9,
        weight_decay=5e-4,
        random_state=0,
    ):
        self.method = method
        self.mode = mode
        self.epsilon = epsilon
        self.delta_epsilon = delta_epsilon
        self.tau = tau
        self.beta = beta
        self.layer = layer
        self.steps = steps
        self.rank = rank
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _method(self):
        spec = {"name": self.method}
        if self.method in _PERTURB_METHODS:
            spec.update(
                mode=self.mode,
                epsilon=self.epsilon,
                delta_epsilon=self.delta_epsilon,
                tau=self.tau,
                beta=self.beta,
                steps=self.steps,
            )
            if self.rank is not None:
                spec["rank"] = self.rank
            if self.layer is not None and self.method != "lpl":
                spec["layers"] = [self.layer]
        return parse_method(spec)

    def _config(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            method=self._method(),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            hidden_sizes=tuple(self.hidden_sizes),
            seed=seed,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1]
        config = self._config()
        if self.layer is not None and not 1 <= self.layer <= len(config.hidden_sizes) + 1:
            raise ValueError(f"layer {self.layer} outside [1, {len(config.hidden_sizes) + 1}]")
        ds = Dataset(X, encoded.astype(np.intp), len(self.classes_))
        self.record_ = train(config, ds)
        self.network_ = self.record_.network
        return self

    def _check(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fit with {self.n_features_in_}")
        return X

    def decision_function(self, X):
        X = self._check(X)
        return forward_full(self.network_, X).logits

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
