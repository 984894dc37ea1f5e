"""scikit-learn style wrappers around the Query2Label model and the pooled baseline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .metrics import mean_ap, per_category_ap
from .model import ModelConfig, init_baseline, init_model
from .trainer import TrainConfig, train
from .validation import check_images, check_targets


class _MultiLabelEstimator(ClassifierMixin, BaseEstimator):
    """Shared fit/predict logic; subclasses pick the network."""

    def __init__(self, *, patch_size=8, d_backbone=64, d_model=64, n_heads=4, d_ff=128, n_layers=2,
                 n_encoder_layers=0, n_convs=2, stem_channels=(16, 32), epochs=30, batch_size=32, lr=1e-3,
                 weight_decay=1e-2, ema_decay=0.9997, warmup_frac=0.05, gamma_pos=0.0, gamma_neg=1.0,
                 threshold=0.5, augment=True, use_ema=False, random_state=0):
        self.patch_size = patch_size
        self.d_backbone = d_backbone
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.n_encoder_layers = n_encoder_layers
        self.n_convs = n_convs
        self.stem_channels = stem_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.warmup_frac = warmup_frac
        self.gamma_pos = gamma_pos
        self.gamma_neg = gamma_neg
        self.threshold = threshold
        self.augment = augment
        self.use_ema = use_ema
        self.random_state = random_state

    def _build(self, config: ModelConfig, seed: int):
        raise NotImplementedError

    def _configs(self, n_classes: int, image_size: int) -> tuple[ModelConfig, TrainConfig]:
        mcfg = ModelConfig(
            n_classes=n_classes, image_size=image_size, patch_size=self.patch_size, d_backbone=self.d_backbone,
            d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff, n_layers=self.n_layers,
            n_encoder_layers=self.n_encoder_layers, n_convs=self.n_convs, stem_channels=tuple(self.stem_channels),
        )
        tcfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            ema_decay=self.ema_decay, warmup_frac=self.warmup_frac, seed=int(self.random_state),
            gamma_pos=self.gamma_pos, gamma_neg=self.gamma_neg, threshold=self.threshold,
            augment_flip=bool(self.augment), augment_shift=4 if self.augment else 0,
        )
        return mcfg, tcfg

    def fit(self, X, Y, eval_set=None):
        """Train on images ``X`` (N×H×W×3) and multi-hot targets ``Y`` (N×K).

        ``eval_set=(X_val, Y_val)`` enables per-epoch validation; the weights
        with the best validation mAP are kept.
        """
        X = check_images(X)
        Y = check_targets(Y, n_samples=len(X))
        mcfg, tcfg = self._configs(Y.shape[1], X.shape[1])
        model = self._build(mcfg, int(self.random_state))
        ev_x = ev_y = None
        if eval_set is not None:
            ev_x = check_images(eval_set[0], image_size=X.shape[1])
            ev_y = check_targets(eval_set[1], n_samples=len(ev_x), n_classes=Y.shape[1])
        result = train(model, X, Y, tcfg, ev_x, ev_y)
        model.load_state_dict(result.best_ema_state if self.use_ema else result.best_state)
        self.model_ = model
        self.history_ = result.history
        self.classes_ = np.arange(Y.shape[1])
        self.n_classes_ = Y.shape[1]
        self.image_size_ = X.shape[1]
        return self

    def _probs(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, image_size=self.image_size_)
        if X.dtype == np.uint8:
            X = X.astype(nc.get_default_dtype()) / 255.0
        return self.model_.predict_proba(X)

    def predict_proba(self, X) -> np.ndarray:
        """Per-class presence probabilities, N×K."""
        return self._probs(X)

    def decision_function(self, X) -> np.ndarray:
        p = np.clip(self._probs(X).astype(np.float64), 1e-12, 1 - 1e-12)
        return np.log(p) - np.log1p(-p)

    def predict(self, X) -> np.ndarray:
        """Multi-hot predictions, ``p > threshold``."""
        return (self._probs(X) > self.threshold).astype(np.int64)

    def score(self, X, Y, sample_weight=None) -> float:
        """Mean average precision over classes with at least one positive."""
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        probs = self._probs(X)
        Y = check_targets(Y, n_samples=len(probs), n_classes=self.n_classes_)
        return mean_ap(per_category_ap(probs, Y))

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.classifier_tags.multi_label = True
        return tags


class Query2LabelClassifier(_MultiLabelEstimator):
    """Label-query transformer decoder classifier.

    >>> clf = Query2LabelClassifier(epochs=5).fit(images, targets)   # doctest: +SKIP
    >>> clf.predict_proba(images[:2]).shape                          # doctest: +SKIP
    (2, 12)
    """

    def _build(self, config, seed):
        return init_model(config, seed)

    def attention_maps(self, X, layer: int = -1) -> np.ndarray:
        """Cross-attention weights of one decoder layer, N×heads×K×H×W."""
        check_is_fitted(self, "model_")
        X = check_images(X, image_size=self.image_size_)
        if X.dtype == np.uint8:
            X = X.astype(nc.get_default_dtype()) / 255.0
        g = self.model_.config.grid
        with nc.no_grad():
            maps = self.model_.forward(X).cross_maps[layer].data
        return maps.reshape(maps.shape[:3] + (g, g))


class PooledBaselineClassifier(_MultiLabelEstimator):
    """Same backbone, global average pooling and a linear head."""

    def _build(self, config, seed):
        return init_baseline(config, seed)
