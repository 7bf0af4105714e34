"""scikit-learn style wrapper around a full training run."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder, StandardScaler
from sklearn.utils.validation import check_is_fitted, validate_data

from .analysis import ParetoRecord, sweep_artifacts
from .autodiff import no_grad
from .data import split_data
from .generator import extract_argmax
from .space import SubnetPolicy, toy_space
from .trainer import TrainConfig, run


class SupernetClassifier(ClassifierMixin, BaseEstimator):
    """Train a width-searchable MLP supernet and predict with one extracted subnet.

    ``target`` picks the resource budget used by :meth:`predict`; ``None``
    means the largest bin center.  Any budget inside the binning range can
    be extracted after fitting with :meth:`extract`.
    """

    def __init__(self, depth: int = 6, candidates=(8, 16, 24), unit_cost: float = 1.0, epochs: int = 20,
                 batch_size: int = 64, lr_w: float = 1e-2, lr_ag: float = 3e-3, lr_b: float = 0.025,
                 lam: float = 50.0, q: int = 8, warmup_epochs: int | None = None, baseline_mode: str = "shift",
                 lr_schedule: str = "cosine", val_fraction: float = 0.2, target: float | None = None,
                 random_state: int = 0):
        self.depth = depth
        self.candidates = candidates
        self.unit_cost = unit_cost
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_w = lr_w
        self.lr_ag = lr_ag
        self.lr_b = lr_b
        self.lam = lam
        self.q = q
        self.warmup_epochs = warmup_epochs
        self.baseline_mode = baseline_mode
        self.lr_schedule = lr_schedule
        self.val_fraction = val_fraction
        self.target = target
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_w=self.lr_w, lr_ag=self.lr_ag,
                           lr_b=self.lr_b, lam=self.lam, q=self.q, warmup_epochs=self.warmup_epochs,
                           seed=self.random_state, baseline_mode=self.baseline_mode, lr_schedule=self.lr_schedule)

    def fit(self, X, y):
        X, y = validate_data(self, X, y)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        codes = self.label_encoder_.transform(y)
        self.scaler_ = StandardScaler().fit(X)
        data = split_data(self.scaler_.transform(X), codes, 1.0 - self.val_fraction, self.random_state,
                          len(self.classes_), standardize=False)
        self.space_ = toy_space(self.depth, tuple(self.candidates), self.unit_cost)
        self.artifacts_ = run(self._train_config(), self.space_, data)
        self.policy_ = self.extract(self.target)
        return self

    def extract(self, target: float | None = None) -> SubnetPolicy:
        """Most probable subnet for resource ``target`` (default: largest bin)."""
        check_is_fitted(self, "artifacts_")
        gen = self.artifacts_.gen
        c = float(gen.binning.centers[-1] if target is None else target)
        return extract_argmax(gen, c)

    def _logits(self, X, policy: SubnetPolicy | None) -> np.ndarray:
        check_is_fitted(self, "artifacts_")
        X = validate_data(self, X, reset=False)
        with no_grad():
            return self.artifacts_.supernet.forward(self.scaler_.transform(X), policy or self.policy_).data

    def predict_proba(self, X, policy: SubnetPolicy | None = None) -> np.ndarray:
        z = self._logits(X, policy)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X, policy: SubnetPolicy | None = None) -> np.ndarray:
        z = self._logits(X, policy)
        return self.classes_[np.argmax(z, axis=1)]

    def pareto(self) -> list[ParetoRecord]:
        """Inherited accuracy per bin on the held-out split used during fit."""
        check_is_fitted(self, "artifacts_")
        return sweep_artifacts(self.artifacts_, self.baseline_mode)
