"""scikit-learn style wrappers around two-stage training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import RunReport, evaluate
from .losses import LossConfig
from .model import BackboneConfig, backbone_forward, mixture_predict, mixture_weights, selector_scores
from .optim import OptimConfig
from .synthbench import Dataset
from .trainer import train_stage1, train_stage2
from .validation import check_coords, check_domains, check_inputs, check_targets


class _CoDExBase(TransformerMixin, BaseEstimator):
    _task = ""

    def __init__(
        self,
        widths=(8, 16, 16),
        affinity_variant="learned",
        pooling="spatiotemporal",
        selector_hidden=32,
        mix_space="prob",
        gamma=2.0,
        tau=1.0,
        lambda_con=1.0,
        lambda_mix=1.0,
        lambda_acc=1.0,
        acc_loss_kind="L1",
        lr=1e-2,
        weight_decay=0.01,
        epochs_stage1=60,
        epochs_stage2=200,
        batch_size=8,
        random_state=0,
    ):
        self.widths = widths
        self.affinity_variant = affinity_variant
        self.pooling = pooling
        self.selector_hidden = selector_hidden
        self.mix_space = mix_space
        self.gamma = gamma
        self.tau = tau
        self.lambda_con = lambda_con
        self.lambda_mix = lambda_mix
        self.lambda_acc = lambda_acc
        self.acc_loss_kind = acc_loss_kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.batch_size = batch_size
        self.random_state = random_state

    def _configs(self, n_channels: int, K: int):
        model = BackboneConfig(task=self._task, in_channels=n_channels, n_classes=K, widths=tuple(self.widths),
                               selector_hidden=self.selector_hidden, mix_space=self.mix_space)
        loss = LossConfig(gamma=self.gamma, tau=self.tau, lambda_con=self.lambda_con, lambda_mix=self.lambda_mix,
                          lambda_acc=self.lambda_acc, acc_loss_kind=self.acc_loss_kind)
        optim = OptimConfig(lr=self.lr, weight_decay=self.weight_decay, epochs_stage1=self.epochs_stage1,
                            epochs_stage2=self.epochs_stage2, batch_size=self.batch_size,
                            seed=int(self.random_state))
        return model, loss, optim

    def _dataset(self, X, y_enc, domains, coords) -> Dataset:
        return Dataset(task=self._task, K=len(self.classes_), inputs=X, labels=y_enc, domain_ids=domains,
                       coords=coords)

    def fit(self, X, y, domains, coords=None):
        """Train experts (stage 1) and then the selector (stage 2).

        ``domains`` gives each sample's training-domain id; ``coords`` its
        domain's position on the unit circle, required by the handcrafted
        and d3g-style affinities.
        """
        X = check_inputs(X, self._task)
        self.classes_, y_enc = check_targets(y, X, self._task)
        domains = check_domains(domains, len(X))
        coords = check_coords(coords, domains)
        self.n_features_in_ = X.shape[2] if self._task == "segmentation" else X.shape[1]
        model, loss, optim = self._configs(self.n_features_in_, len(self.classes_))
        data = self._dataset(X, y_enc, domains, coords)
        self.stage1_ = train_stage1(data, model, optim, self.affinity_variant, loss)
        self.bundle_ = train_stage2(self.stage1_, data, optim, loss, self.pooling)
        self.domains_ = np.asarray(self.bundle_.domain_ids)
        return self

    def _checked(self, X):
        check_is_fitted(self, "bundle_")
        return check_inputs(X, self._task, self.n_features_in_)

    def predict_proba(self, X) -> np.ndarray:
        """Mixture class probabilities; the class axis is 1 (classification) or 2 (segmentation)."""
        X = self._checked(X)
        probs, _ = mixture_predict(self.bundle_, X, self.tau, self.pooling)
        return probs.data

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=2 if self._task == "segmentation" else 1)]

    def transform(self, X) -> np.ndarray:
        """Selector mixture weights over the training-domain experts: [N, D] (or [N, T, D])."""
        X = self._checked(X)
        scores = selector_scores(self.bundle_, backbone_forward(self.bundle_, X), self.pooling)
        return mixture_weights(scores, self.tau).data

    def score(self, X, y, sample_weight=None) -> float:
        """Overall accuracy of the mixture prediction, pooled over all positions."""
        pred = self.predict(X)
        y = np.asarray(y)
        hit = (pred == y).reshape(len(y), -1).mean(axis=1)
        return float(np.average(hit, weights=sample_weight))

    def report(self, X, y, domains, coords=None) -> RunReport:
        """Full evaluation (per head, argmax head, mixtures, oracle) on held-out data."""
        X = self._checked(X)
        y = np.asarray(y)
        y_enc = np.searchsorted(self.classes_, y)
        if np.any(self.classes_[np.clip(y_enc, 0, len(self.classes_) - 1)] != y):
            raise ValueError("labels contain classes unseen during fit")
        domains = np.asarray(domains, dtype=np.int64)
        data = self._dataset(X, y_enc, domains, check_coords(coords, domains))
        return evaluate(self.bundle_, data, self.tau)


class CoDExSegmenter(_CoDExBase):
    """Per-pixel multi-expert model for [N, T, C, H, W] image time series."""

    _task = "segmentation"


class CoDExClassifier(ClassifierMixin, _CoDExBase):
    """Multi-expert classifier for [N, F] feature vectors."""

    _task = "classification"

    def __init__(self, widths=(32, 32), affinity_variant="learned", selector_hidden=32, mix_space="prob",
                 gamma=2.0, tau=1.0, lambda_con=1.0, lambda_mix=1.0, lambda_acc=1.0, acc_loss_kind="L1",
                 lr=1e-2, weight_decay=0.01, epochs_stage1=60, epochs_stage2=200, batch_size=8, random_state=0):
        super().__init__(widths=widths, affinity_variant=affinity_variant, pooling="spatiotemporal",
                         selector_hidden=selector_hidden, mix_space=mix_space, gamma=gamma, tau=tau,
                         lambda_con=lambda_con, lambda_mix=lambda_mix, lambda_acc=lambda_acc,
                         acc_loss_kind=acc_loss_kind, lr=lr, weight_decay=weight_decay,
                         epochs_stage1=epochs_stage1, epochs_stage2=epochs_stage2, batch_size=batch_size,
                         random_state=random_state)
