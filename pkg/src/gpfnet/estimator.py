"""scikit-learn estimator wrapper around the fusion network.

Samples are rows of a 2-D array laid out as ``[image_vec | token_1 | ... |
token_n]``: the first ``img_dim`` columns are the image embedding and the rest
are ``n`` text tokens of width ``txt_dim`` each (``n`` is inferred from the
column count). ``transform`` yields L2-normalised fused features for
retrieval, ``predict`` the identity classifier's labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import no_grad
from .evaluation import DEFAULT_KS, EvalReport, evaluate_features
from .model import GpfModel, ModelConfig
from .training import Batch, TrainConfig, train


def pack_samples(images, tokens) -> np.ndarray:
    """Inverse of the column layout: ``(N, img_dim)`` + ``(N, n, txt_dim)`` -> ``(N, cols)``."""
    images = np.asarray(images, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.float64)
    return np.hstack([images, tokens.reshape(len(tokens), -1)])


class GatedFusionReID(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Gated progressive fusion network with identity + triplet training.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    ``p_identities``/``k_instances`` default to the largest PK shape up to
    16x4 that the training labels support.
    """

    def __init__(
        self,
        img_dim=2048,
        txt_dim=768,
        d_model=512,
        fusion_layers=4,
        fusion_heads=8,
        encoder_layers=4,
        encoder_heads=4,
        ablation_mode="full",
        lr=3.5e-4,
        weight_decay=1e-5,
        bias_decay=1e-7,
        iterations=180,
        p_identities=None,
        k_instances=None,
        margin=0.3,
        random_state=0,
    ):
        self.img_dim = img_dim
        self.txt_dim = txt_dim
        self.d_model = d_model
        self.fusion_layers = fusion_layers
        self.fusion_heads = fusion_heads
        self.encoder_layers = encoder_layers
        self.encoder_heads = encoder_heads
        self.ablation_mode = ablation_mode
        self.lr = lr
        self.weight_decay = weight_decay
        self.bias_decay = bias_decay
        self.iterations = iterations
        self.p_identities = p_identities
        self.k_instances = k_instances
        self.margin = margin
        self.random_state = random_state

    def _split(self, X) -> tuple[np.ndarray, np.ndarray]:
        extra = X.shape[1] - self.img_dim
        if extra < self.txt_dim or extra % self.txt_dim:
            raise ValueError(
                f"{X.shape[1]} columns do not split into img_dim={self.img_dim} "
                f"plus a whole number (>= 1) of txt_dim={self.txt_dim} tokens"
            )
        tokens = X[:, self.img_dim :].reshape(len(X), -1, self.txt_dim)
        return X[:, : self.img_dim], tokens

    def _pk_shape(self, y_enc: np.ndarray) -> tuple[int, int]:
        counts = np.bincount(y_enc)
        k = self.k_instances
        if k is None:
            k = 4 if (counts >= 4).sum() >= 16 else 2
        p = self.p_identities
        if p is None:
            p = min(16, int((counts >= k).sum()))
        return p, k

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        images, tokens = self._split(X)
        self.encoder_ = LabelEncoder().fit(y)
        y_enc = self.encoder_.transform(y)
        self.classes_ = self.encoder_.classes_
        self.n_features_in_ = X.shape[1]
        mcfg = ModelConfig(
            d_model=self.d_model,
            img_dim=self.img_dim,
            txt_dim=self.txt_dim,
            fusion_layers=self.fusion_layers,
            fusion_heads=self.fusion_heads,
            encoder_layers=self.encoder_layers,
            encoder_heads=self.encoder_heads,
            num_identities=max(2, len(self.classes_)),
            ablation_mode=self.ablation_mode,
        )
        p, k = self._pk_shape(y_enc)
        tcfg = TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            bias_decay=self.bias_decay,
            iterations=self.iterations,
            batch_size=p * k,
            p_identities=p,
            k_instances=k,
            margin=self.margin,
            seed=self.random_state,
        )
        self.model_ = GpfModel.init(mcfg, self.random_state)
        result = train(Batch(images, list(tokens), y_enc), self.model_, tcfg)
        self.loss_history_ = result.history
        return self

    def _check(self, X) -> tuple[np.ndarray, np.ndarray]:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self._split(X)

    def transform(self, X) -> np.ndarray:
        images, tokens = self._check(X)
        return self.model_.embed(images, tokens)

    def decision_function(self, X) -> np.ndarray:
        images, tokens = self._check(X)
        with no_grad():
            k_f = self.model_.forward(images, tokens).vector
            return self.model_.classify(k_f).data

    def predict(self, X) -> np.ndarray:
        return self.encoder_.inverse_transform(self.decision_function(X).argmax(axis=1))

    def retrieval_report(self, X_query, y_query, X_gallery=None, y_gallery=None, ks=DEFAULT_KS) -> EvalReport:
        """mAP/CMC of query-vs-gallery retrieval on the fused features.

        Without a gallery the query set is searched against itself, each
        query excluding its own row.
        """
        q = self.transform(X_query)
        if X_gallery is None:
            _, yq = np.unique(np.asarray(y_query), return_inverse=True)
            keys = [str(i) for i in range(len(q))]
            return evaluate_features(q, yq, q, yq, q_keys=keys, g_keys=keys, ks=ks)
        # retrieval identities need not be training classes; encode both sides jointly
        _, codes = np.unique(np.concatenate([np.asarray(y_query), np.asarray(y_gallery)]), return_inverse=True)
        yq, yg = codes[: len(q)], codes[len(q) :]
        return evaluate_features(q, yq, self.transform(X_gallery), yg, ks=ks)
