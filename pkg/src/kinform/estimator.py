"""scikit-learn estimator over precomputed face embeddings (restricted protocol).

Each row of ``X`` is ``[class_code, left embedding..., right embedding...]``
where ``class_code`` indexes ``TRAINED_CLASSES`` (0 = BB, ..., 6 = MS). Rows
carry no identities, so training uses the given pairs only and the backbone
stays frozen; the per-class fusion heads are learned.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .data.io import PairList
from .data.kinship import TRAINED_CLASSES, ImageRecord, PairSample
from .training.config import TrainConfig
from .training.trainer import train


def pack_pairs(kins, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Build the ``X`` layout from class tags (or codes) and two embedding matrices."""
    codes = [k if isinstance(k, (int, np.integer)) else TRAINED_CLASSES.index(_parse(k)) for k in kins]
    return np.column_stack([np.asarray(codes, dtype=float), np.asarray(left, float), np.asarray(right, float)])


def _parse(k):
    from .data.kinship import KinshipClass

    return k if isinstance(k, KinshipClass) else KinshipClass.parse(k)


class KinshipVerifier(ClassifierMixin, BaseEstimator):
    def __init__(self, alpha=1.0, lr=0.01, epochs=30, batch_size=64, seed=0, weighting="auto", fusion="conv",
                 embed_dim=16, channels=16, hidden_layers=8):
        self.alpha = alpha
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.weighting = weighting
        self.fusion = fusion
        self.embed_dim = embed_dim
        self.channels = channels
        self.hidden_layers = hidden_layers

    def _split(self, X):
        codes = X[:, 0]
        if not np.all(codes == np.round(codes)) or codes.min() < 0 or codes.max() >= len(TRAINED_CLASSES):
            raise ValueError(f"column 0 must hold class codes in [0, {len(TRAINED_CLASSES)})")
        width = X.shape[1] - 1
        if width < 2 or width % 2:
            raise ValueError("X needs a class column followed by two equal-length embeddings")
        d = width // 2
        return codes.astype(int), X[:, 1:1 + d], X[:, 1 + d:]

    def _pairs(self, X, y=None) -> PairList:
        codes, left, right = self._split(X)
        images, pairs = {}, []
        for i, c in enumerate(codes):
            a, b = f"row{i}/a", f"row{i}/b"
            images[a] = ImageRecord(a, embedding=left[i].copy())
            images[b] = ImageRecord(b, embedding=right[i].copy())
            pairs.append(PairSample(a, b, TRAINED_CLASSES[c], 0 if y is None else int(y[i])))
        return PairList(pairs, images)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be 0 (not kin) or 1 (kin)")
        self.n_features_in_ = X.shape[1]
        pairs = self._pairs(X, y)
        tags = tuple(k.tag for k in TRAINED_CLASSES if any(p.kin == k for p in pairs))
        cfg = TrainConfig(alpha=self.alpha, lr=self.lr, lr_min=min(1e-5, self.lr), epochs=self.epochs,
                          batch_size=self.batch_size, seed=self.seed, protocol="restricted", weighting=self.weighting,
                          fusion=self.fusion, classes=tags, embed_dim=self.embed_dim, channels=self.channels,
                          hidden_layers=self.hidden_layers)
        result = train(pairs, cfg)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.metrics_ = result.metrics
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        pairs = self._pairs(X)
        p = self.model_.score_pairs(pairs, pairs.images)
        if np.isnan(p).any():
            raise ValueError("X contains a kinship class that was absent from the training data")
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
