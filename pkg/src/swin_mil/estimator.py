"""scikit-learn compatible wrapper around :class:`SwinMIL`.

``fit(X, y)`` takes images and *image-level* labels only. ``transform``
returns fused pixel probability maps, ``predict_mask`` their binarization,
and ``predict``/``predict_proba`` classify whole images from the pooled
bag score.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import TrainingBag
from .model import ModelConfig
from .training import Checkpoint, TrainConfig, make_checkpoint, restore, train
from .validation import check_bag_labels, check_images


class SwinMILSegmenter(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Weakly supervised segmenter trained from image-level labels.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    defaults are the desk-scale preset (64x64 inputs, lr 1e-3).
    """

    def __init__(
        self,
        embed_dim=24,
        depths=(2, 2, 2),
        num_heads=(3, 6, 12),
        window_size=4,
        patch_size=4,
        mlp_ratio=4.0,
        use_relative_position_bias=True,
        r=4.0,
        fusion_weights=None,
        clamp_eps=1e-7,
        threshold=0.5,
        lr=1e-3,
        side_output_lr_ratio=0.01,
        weight_decay=5e-4,
        batch_size=4,
        epochs=3,
        random_state=0,
    ):
        self.embed_dim = embed_dim
        self.depths = depths
        self.num_heads = num_heads
        self.window_size = window_size
        self.patch_size = patch_size
        self.mlp_ratio = mlp_ratio
        self.use_relative_position_bias = use_relative_position_bias
        self.r = r
        self.fusion_weights = fusion_weights
        self.clamp_eps = clamp_eps
        self.threshold = threshold
        self.lr = lr
        self.side_output_lr_ratio = side_output_lr_ratio
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _model_config(self, in_channels: int) -> ModelConfig:
        return ModelConfig(
            in_channels=in_channels,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depths=tuple(self.depths),
            num_heads=tuple(self.num_heads),
            window_size=self.window_size,
            mlp_ratio=self.mlp_ratio,
            use_relative_position_bias=self.use_relative_position_bias,
            r=self.r,
            fusion_weights=None if self.fusion_weights is None else tuple(self.fusion_weights),
            clamp_eps=self.clamp_eps,
            threshold=self.threshold,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            global_lr=self.lr,
            side_output_lr_ratio=self.side_output_lr_ratio,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y):
        """Train on images ``X`` (``[n, H, W]`` or ``[n, H, W, ch]``) and
        bag labels ``y`` in {0, 1}. Pixel masks are not accepted."""
        X = check_images(X)
        y = check_bag_labels(y, len(X))
        bags = [TrainingBag(image=img, label=int(lab)) for img, lab in zip(X, y)]
        result = train(bags, self._model_config(X.shape[-1]), self._train_config())
        self.model_ = result.model
        self.optimizer_ = result.optimizer
        self.rng_ = result.rng
        self.loss_history_ = result.log
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:]
        return self

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if self.image_shape_ is not None and X.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return X

    def side_outputs(self, X) -> tuple[list[np.ndarray], np.ndarray]:
        """Per-stage probability maps and the fused map, each ``[n, H, W]``."""
        X = self._check_X(X)
        stages, fused, _ = self.model_.predict(X)
        return stages, fused

    def transform(self, X) -> np.ndarray:
        """Fused pixel probability maps ``[n, H, W]``."""
        return self.side_outputs(X)[1]

    def predict_mask(self, X, threshold: float | None = None) -> np.ndarray:
        t = self.threshold if threshold is None else threshold
        return self.transform(X) >= t

    def decision_function(self, X) -> np.ndarray:
        """Generalized-mean bag score of the fused map."""
        X = self._check_X(X)
        return self.model_.predict(X)[2]

    def predict_proba(self, X) -> np.ndarray:
        s = self.decision_function(X).astype(np.float64)
        return np.column_stack([1.0 - s, s])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= 0.5).astype(int)

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "model_")
        return make_checkpoint(self.model_, self.optimizer_, self._train_config(), self.epochs, self.rng_)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SwinMILSegmenter":
        model, opt, tcfg, rng = restore(ckpt)
        mc = model.config
        est = cls(
            embed_dim=mc.embed_dim,
            depths=mc.depths,
            num_heads=mc.num_heads,
            window_size=mc.window_size,
            patch_size=mc.patch_size,
            mlp_ratio=mc.mlp_ratio,
            use_relative_position_bias=mc.use_relative_position_bias,
            r=mc.r,
            fusion_weights=mc.fusion_weights,
            clamp_eps=mc.clamp_eps,
            threshold=mc.threshold,
            lr=tcfg.global_lr,
            side_output_lr_ratio=tcfg.side_output_lr_ratio,
            weight_decay=tcfg.weight_decay,
            batch_size=tcfg.batch_size,
            epochs=tcfg.epochs,
            random_state=tcfg.seed,
        )
        est.model_, est.optimizer_, est.rng_ = model, opt, rng
        est.loss_history_ = []
        est.classes_ = np.array([0, 1])
        est.image_shape_ = None
        return est
