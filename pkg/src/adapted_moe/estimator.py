"""scikit-learn compatible front end."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .pipeline import InferenceFlags, ModelBundle, TrainConfig, infer_images, train_model
from .routing import embed, route_topk
from .validation import check_feature_maps, check_subclass_labels

# parameters that change the trained bundle; the rest only affect scoring
_TRAINING_PARAMS = ("moe", "norm", "loss", "embed_dim", "activation")


class AdaptedMoE(TransformerMixin, BaseEstimator):
    """Mixture-of-experts anomaly detector over backbone feature maps.

    ``fit(X, y)`` takes N×C×H×W feature maps of normal samples and their
    subclass labels.  ``anomaly_score`` returns one score per image (higher
    means more anomalous) and ``anomaly_map`` the smoothed per-pixel maps at
    ``image_size``.  ``transform`` yields the pooled routing embeddings.

    ``tta``, ``top_k`` and ``smooth_sigma`` are read at scoring time, so they
    can be changed with ``set_params`` on a fitted model without refitting.
    """

    def __init__(self, epochs=160, batch_size=8, lr_start=1e-4, lr_end=2e-4, alpha=0.5,
                 center_rate=0.5, noise_std=0.015, top_k=4, moe=True, tta=True, norm=True,
                 loss="center", margin=0.5, activation="relu", embed_dim=None,
                 expert_hidden=None, smooth_sigma=4.0, tta_std_mode="vector",
                 image_size=None, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.alpha = alpha
        self.center_rate = center_rate
        self.noise_std = noise_std
        self.top_k = top_k
        self.moe = moe
        self.tta = tta
        self.norm = norm
        self.loss = loss
        self.margin = margin
        self.activation = activation
        self.embed_dim = embed_dim
        self.expert_hidden = expert_hidden
        self.smooth_sigma = smooth_sigma
        self.tta_std_mode = tta_std_mode
        self.image_size = image_size
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        params = self.get_params()
        params["seed"] = params.pop("random_state")
        params.pop("image_size")
        return TrainConfig.from_dict(params)

    def fit(self, X, y):
        X = check_feature_maps(X)
        y = check_subclass_labels(y, len(X))
        self.bundle_ = train_model(X, y, self._train_config(), self.image_size)
        self._set_fitted_attributes()
        return self

    def _set_fitted_attributes(self):
        self.n_features_in_ = self.bundle_.in_channels
        self.n_experts_ = self.bundle_.n_experts
        self.centers_ = np.asarray(self.bundle_.routing.centers)
        self.history_ = self.bundle_.history

    def _check_ready(self, X):
        check_is_fitted(self, "bundle_")
        cfg = self.bundle_.config
        for name in _TRAINING_PARAMS:
            if getattr(self, name) != getattr(cfg, name):
                raise ValueError(
                    f"{name}={getattr(self, name)!r} differs from the fitted value "
                    f"{getattr(cfg, name)!r}; refit to change it"
                )
        return check_feature_maps(X, channels=self.n_features_in_)

    def _flags(self) -> InferenceFlags:
        return InferenceFlags(tta=self.tta, top_k=self.top_k, smooth_sigma=self.smooth_sigma)

    def infer(self, X) -> list:
        """Full :class:`AnomalyResult` per image."""
        X = self._check_ready(X)
        return infer_images(X, self.bundle_, self._flags())

    def anomaly_score(self, X) -> np.ndarray:
        return np.array([r.score for r in self.infer(X)])

    def anomaly_map(self, X) -> np.ndarray:
        return np.stack([r.anomaly_map for r in self.infer(X)])

    def transform(self, X) -> np.ndarray:
        X = self._check_ready(X)
        out, _ = embed(X, self.bundle_.routing, self.bundle_.config.norm)
        return out.x

    def route(self, X):
        """Top-k expert indices and renormalized weights per image."""
        k = min(self.top_k, self.n_experts_)
        return [route_topk(x, self.centers_, k) for x in self.transform(X)]

    def save(self, path) -> None:
        check_is_fitted(self, "bundle_")
        save_checkpoint(path, self.bundle_)

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "AdaptedMoE":
        cfg = bundle.config.to_dict()
        cfg["random_state"] = cfg.pop("seed")
        est = cls(image_size=tuple(bundle.image_size),
                  **{k: v for k, v in cfg.items() if k in cls._get_param_names()})
        est.bundle_ = bundle
        est._set_fitted_attributes()
        return est

    @classmethod
    def load(cls, path) -> "AdaptedMoE":
        return cls.from_bundle(load_checkpoint(path))
