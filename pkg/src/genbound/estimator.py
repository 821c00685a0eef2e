"""Scikit-learn estimator wrapping the bound-tracing SGD trainer.

The classifier plays by sklearn's rules (get_params/set_params, clone,
check_X_y validation, classes_ inference), so it drops into pipelines and
model selection; after fit it additionally exposes the per-epoch bound trace.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bounds import BoundObserver, BoundOptions, BoundTrace
from .data import Dataset, split_dataset
from .nn import init_mlp, mlp_forward, parse_loss, softmax
from .optim import NoiseSchedule, TrainConfig, run_training
from .rng import STREAM_FLATNESS, StreamKey


class BoundTracedMLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP trained by (optionally clipped) mini-batch SGD.

    While fitting, a per-epoch observer estimates loss-landscape flatness
    under Gaussian parameter perturbations and accumulates the trajectory
    terms of the sub-Gaussian and bounded-loss generalization bounds for
    both the fresh-noise and cumulative-noise surrogate constructions.

    Parameters mirror the training configuration; `probe_size` samples are
    held out of the training split for bound estimation (and early stopping
    when `early_stop_patience` is set).
    """

    def __init__(
        self,
        hidden_dims=(512,),
        eta=0.01,
        batch_size=64,
        epochs=10,
        sigma=0.005,
        clip_threshold=None,
        loss="cross_entropy",
        loss_c0=1.0,
        R=1.0,
        c0=1.0,
        c1=1.0,
        alpha=0.5,
        m_samples=32,
        probe_size=512,
        early_stop_patience=None,
        early_stop_tol=1e-4,
        compute_bounds=True,
        seed=0,
    ):
        self.hidden_dims = hidden_dims
        self.eta = eta
        self.batch_size = batch_size
        self.epochs = epochs
        self.sigma = sigma
        self.clip_threshold = clip_threshold
        self.loss = loss
        self.loss_c0 = loss_c0
        self.R = R
        self.c0 = c0
        self.c1 = c1
        self.alpha = alpha
        self.m_samples = m_samples
        self.probe_size = probe_size
        self.early_stop_patience = early_stop_patience
        self.early_stop_tol = early_stop_tol
        self.compute_bounds = compute_bounds
        self.seed = seed

    def fit(self, X, y) -> "BoundTracedMLPClassifier":
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        full = Dataset(X, encoded.astype(np.int64))

        probe_n = min(self.probe_size, max(2, full.n // 5))
        probe, train = split_dataset(full, probe_n, self.seed)

        config = TrainConfig(
            eta=self.eta,
            batch_size=min(self.batch_size, train.n),
            epochs=self.epochs,
            clip_threshold=self.clip_threshold,
            loss=parse_loss(self.loss, self.loss_c0),
            seed=self.seed,
            early_stop_patience=self.early_stop_patience,
            early_stop_tol=self.early_stop_tol,
            R=self.R,
            c0=self.c0,
            c1=self.c1,
            alpha=self.alpha,
        )
        noise = NoiseSchedule.isotropic(self.sigma)
        model = init_mlp(
            (X.shape[1], *self.hidden_dims, len(self.classes_)), self.seed
        )

        observers = []
        observer = None
        if self.compute_bounds:
            observer = BoundObserver(
                probe.features,
                probe.labels,
                train.n,
                StreamKey(self.seed, STREAM_FLATNESS),
                BoundOptions(m_samples=self.m_samples),
            )
            observers.append(observer)

        result = run_training(
            config, model, train, test=probe, observers=observers, noise=noise
        )
        self.model_ = result.model
        self.trace_: list[BoundTrace] = observer.rows if observer else []
        self.step_log_ = result.step_log
        self.stopped_early_ = result.stopped_early
        self.epochs_run_ = result.epochs_run
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        logits, _ = mlp_forward(self.model_, X)
        return logits

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
