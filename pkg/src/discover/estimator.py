"""scikit-learn style estimators around the dual-latent model and baselines.

``fit(X, y)`` trains with early stopping on an internal validation split;
``transform(X, y)`` returns posterior means of the latents.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metrics import eval_nll, posterior_params, reconstruct
from .model import InputError, build_model
from .objective import LossWeights
from .training import TrainOptions, fit


class _BaseVAE(TransformerMixin, BaseEstimator):
    _kind = "discover"

    def __init__(self, d_latent=1, n_hidden=2, d_hidden=8, activation="relu",
                 likelihood="gaussian", w_rec=1.0, w_kl_z=1.0, w_kl_w=1.0, w_adv=1.0,
                 w_rec_z=1.0, lr=1e-3, lr_adv=None, batch_size=128, max_epochs=1000,
                 patience=50, weight_decay=1e-2, detach_prior_means=False,
                 validation_fraction=0.1, random_state=None):
        self.d_latent = d_latent
        self.n_hidden = n_hidden
        self.d_hidden = d_hidden
        self.activation = activation
        self.likelihood = likelihood
        self.w_rec = w_rec
        self.w_kl_z = w_kl_z
        self.w_kl_w = w_kl_w
        self.w_adv = w_adv
        self.w_rec_z = w_rec_z
        self.lr = lr
        self.lr_adv = lr_adv
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.weight_decay = weight_decay
        self.detach_prior_means = detach_prior_means
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _validate_y(self, y):
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(np.mod(y, 1) != 0):
                raise InputError("condition labels must be integers")
            y = y.astype(np.int64)
        if y.min() < 0:
            raise InputError("condition labels must be non-negative")
        return y.astype(np.int64)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        y = self._validate_y(y)
        self.n_classes_ = int(max(2, y.max() + 1))
        self.n_features_in_ = X.shape[1]
        seq = np.random.SeedSequence(self.random_state)
        init_seed, split_seed, train_seed = (int(s.generate_state(1)[0]) for s in seq.spawn(3))
        n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
        perm = np.random.default_rng(split_seed).permutation(X.shape[0])
        val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        self.model_ = build_model(self._kind, X.shape[1], self.n_classes_, self.d_latent,
                                  self.n_hidden, self.d_hidden, np.random.default_rng(init_seed),
                                  self.likelihood, self.activation)
        weights = LossWeights(rec=self.w_rec, kl_z=self.w_kl_z, kl_w=self.w_kl_w,
                              adv=self.w_adv, rec_z=self.w_rec_z)
        opts = TrainOptions(lr=self.lr, lr_adv=self.lr_adv, batch_size=self.batch_size,
                            max_epochs=self.max_epochs, patience=self.patience,
                            weight_decay=self.weight_decay,
                            detach_prior_means=self.detach_prior_means)
        self.report_ = fit(self.model_, (X[tr], y[tr]), (X[val], y[val]), weights, opts,
                           np.random.default_rng(train_seed))
        return self

    def _check(self, X, y=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if y is None:
            y = np.zeros(X.shape[0], dtype=np.int64)
        else:
            y = self._validate_y(y)
            if y.shape[0] != X.shape[0]:
                raise ValueError("X and y have different numbers of rows")
        return X, y

    def score(self, X, y):
        """Mean log-likelihood bound per sample (higher is better)."""
        X, y = self._check(X, y)
        return -eval_nll(self.model_, X, y, 1, seed=0)[0]


class DISCoVeR(_BaseVAE):
    """Dual-latent VAE with condition-invariant ``z`` and condition-aware ``w``."""

    _kind = "discover"

    def transform(self, X, y=None):
        """Concatenated posterior means ``[mu_z, mu_w]``; ``mu_w`` needs ``y``."""
        X, y_checked = self._check(X, y)
        mz, _, mw, _ = posterior_params(self.model_, X, y_checked)
        if y is None:
            return mz.astype(np.float32)
        return np.hstack([mz, mw]).astype(np.float32)

    def transform_z(self, X):
        X, y = self._check(X)
        return posterior_params(self.model_, X, y)[0].astype(np.float32)

    def reconstruct_marginal(self, X):
        """z-only reconstruction (the label-marginal estimate)."""
        X, y = self._check(X)
        return reconstruct(self.model_, X, y)["x_hat"]

    def reconstruct(self, X, y):
        X, y = self._check(X, y)
        return reconstruct(self.model_, X, y)["x_tilde"]

    @property
    def prior_means_(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.prior_means.copy()


class PlainVAE(_BaseVAE):
    """Single-latent VAE; labels are accepted by ``fit`` and ignored."""

    _kind = "plain_vae"

    def transform(self, X, y=None):
        X, y = self._check(X)
        return posterior_params(self.model_, X, y)[0].astype(np.float32)

    def reconstruct(self, X):
        X, y = self._check(X)
        return reconstruct(self.model_, X, y)["x_hat"]


class ConditionalVAE(_BaseVAE):
    """VAE with the label fed to both encoder and decoder."""

    _kind = "conditional_vae"

    def transform(self, X, y=None):
        if y is None:
            raise InputError("ConditionalVAE.transform needs labels")
        X, y = self._check(X, y)
        return posterior_params(self.model_, X, y)[0].astype(np.float32)

    def reconstruct(self, X, y):
        X, y = self._check(X, y)
        return reconstruct(self.model_, X, y)["x_tilde"]


__all__ = ["DISCoVeR", "PlainVAE", "ConditionalVAE"]
