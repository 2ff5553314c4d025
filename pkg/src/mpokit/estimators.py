"""scikit-learn style estimators over the functional core.

``MPOCompressor`` fits a weight matrix and then behaves like the linear map
it approximates; ``AffineQuantizer`` learns per-row scales; ``MPOHealingClassifier``
wraps the toy MLP with a compress-then-heal workflow.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import heal
from .mpo import IndexScheme, apply, decompose, param_count, reconstruct
from .quantization import QMAX, QuantizedTensor, dequantize, quantize_affine
from .tensor import DenseTensor, DType


class MPOCompressor(TransformerMixin, BaseEstimator):
    """Factorize a weight matrix ``W`` (M x N) into MPO cores.

    ``fit(W)`` decomposes; ``transform(X)`` computes ``X @ W_mpo.T`` for
    samples ``X`` of shape (B, N) without forming ``W_mpo``.
    """

    def __init__(self, n_cores=3, max_bond=4, rel_tol=0.0, row_factors=None, col_factors=None):
        self.n_cores = n_cores
        self.max_bond = max_bond
        self.rel_tol = rel_tol
        self.row_factors = row_factors
        self.col_factors = col_factors

    def fit(self, W, y=None):
        W = check_array(W, dtype=[np.float64, np.float32])
        if self.row_factors is not None or self.col_factors is not None:
            scheme = IndexScheme(self.row_factors, self.col_factors)
        else:
            scheme = IndexScheme.auto(W.shape, self.n_cores)
        self.layer_ = decompose(W, scheme, self.max_bond, self.rel_tol)
        self.bond_dims_ = self.layer_.bond_dims
        self.truncation_error_ = self.layer_.truncation_error
        self.n_params_ = param_count(self.layer_)
        self.compression_ratio_ = self.n_params_ / W.size
        self.n_features_in_ = W.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "layer_")
        X = check_array(X, dtype=[np.float64, np.float32])
        return apply(self.layer_, X.T).T

    def reconstruct(self):
        check_is_fitted(self, "layer_")
        return reconstruct(self.layer_)


class AffineQuantizer(TransformerMixin, BaseEstimator):
    """Symmetric int8/int4 quantizer: ``transform`` yields codes,
    ``inverse_transform`` the dequantized float32 values."""

    def __init__(self, bits=8, granularity="per_row"):
        self.bits = bits
        self.granularity = granularity

    def fit(self, W, y=None):
        W = check_array(W, dtype=[np.float64, np.float32])
        q = quantize_affine(W, self.bits, self.granularity)
        self.scales_ = q.scales
        self.shape_ = q.original_shape
        self.n_features_in_ = W.shape[1]
        return self

    def _per_element(self):
        return self.scales_[:, None] if self.granularity == "per_row" else self.scales_[0]

    def transform(self, W):
        check_is_fitted(self, "scales_")
        W = check_array(W, dtype=[np.float64, np.float32])
        if self.granularity == "per_row" and W.shape[0] != self.scales_.size:
            raise ValueError(f"fitted on {self.scales_.size} rows, got {W.shape[0]}")
        qmax = QMAX[self.bits]
        return np.clip(np.rint(W / self._per_element()), -qmax, qmax).astype(np.int8)

    def inverse_transform(self, Q):
        check_is_fitted(self, "scales_")
        Q = np.asarray(Q, dtype=np.int8)
        storage = DType.I8 if self.bits == 8 else DType.I4PACKED
        qt = QuantizedTensor(DenseTensor.from_array(Q, storage), self.scales_,
                             np.zeros(self.scales_.shape, dtype=np.int64), Q.shape,
                             self.bits, self.granularity)
        return dequantize(qt)


class MPOHealingClassifier(ClassifierMixin, BaseEstimator):
    """Rectifier MLP trained with Adam; ``compress`` tensorizes hidden layers,
    ``heal`` retrains the compressed model."""

    def __init__(self, hidden_sizes=(216, 216), epochs=10, batch_size=64, learning_rate=1e-3,
                 optimizer="adam", random_state=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.random_state = random_state

    def _config(self, epochs, scope="all", seed_offset=0, learning_rate=None):
        return heal.TrainConfig(epochs=epochs, batch_size=self.batch_size,
                                learning_rate=self.learning_rate if learning_rate is None else learning_rate,
                                optimizer=self.optimizer, seed=self.random_state + seed_offset,
                                trainable_scope=scope)

    def _dataset(self, X, y):
        codes = np.searchsorted(self.classes_, y)
        return heal.ToyDataset(X, codes, X, codes, self.random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        sizes = (X.shape[1], *self.hidden_sizes, len(self.classes_))
        self.model_ = heal.init_model(sizes, self.random_state)
        self.history_ = heal.train(self.model_, self._dataset(X, y), self._config(self.epochs))
        return self

    def compress(self, max_bond=4, n_cores=3, pattern="hidden[1-9]*"):
        check_is_fitted(self, "model_")
        self.model_, self.compression_report_ = heal.tensorize_model(
            self.model_, max_bond, n_cores, pattern)
        return self

    def heal(self, X, y, epochs=3, scope="mpo_cores_only", learning_rate=None):
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        cfg = self._config(epochs, scope, seed_offset=1, learning_rate=learning_rate)
        self.history_ = self.history_ + heal.train(self.model_, self._dataset(X, y), cfg)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        logits, _ = heal.forward(self.model_, X)
        return logits

    def predict_proba(self, X):
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
