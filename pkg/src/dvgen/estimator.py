"""scikit-learn style wrapper around :class:`~dvgen.dvg.DvgModel`."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dvg
from .errors import DimensionMismatch


def _check_clips(X, ndim: int, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != ndim:
        raise DimensionMismatch(f"{what} must be a {ndim}-D array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{what} contains non-finite values")
    if X.min(initial=0.0) < 0.0 or X.max(initial=0.0) > 1.0:
        raise ValueError(f"{what} pixels must lie in [0, 1]")
    return X


class DiverseVideoGenerator(TransformerMixin, BaseEstimator):
    """Fit on clips ``(N, T, H, W)``; transform frames to latents; sample futures.

    ``transform`` maps frames ``(..., H, W)`` to latents ``(..., d)`` and
    ``inverse_transform`` decodes them back.  ``generate`` rolls out
    ``n_samples`` seeded traces after a context.
    """

    def __init__(self, latent_dim=8, hidden=32, cell="lstm", num_inducing=16,
                 lambdas=dvg.DEFAULT_LAMBDAS, epochs=300, lr=2e-3, batch_size=32, context=5,
                 predict=10, trigger="gp_variance", random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.cell = cell
        self.num_inducing = num_inducing
        self.lambdas = lambdas
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.context = context
        self.predict = predict
        self.trigger = trigger
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_clips(X, 4, "clips")
        seed = int(self.random_state or 0)
        cfg = dvg.DvgConfig(height=X.shape[2], width=X.shape[3], latent_dim=self.latent_dim,
                            hidden=self.hidden, cell=self.cell, num_inducing=self.num_inducing,
                            lambdas=tuple(self.lambdas), seed=seed)
        tc = dvg.TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                             context=self.context, predict=self.predict, seed=seed)
        model = dvg.DvgModel(cfg).init_from_data(X, tc.clip_length, seed=seed)
        self.model_, self.training_log_ = dvg.train(model, X, tc)
        self.frame_shape_ = X.shape[2:]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        with torch.no_grad():
            return self.model_.autoencoder.encode(torch.from_numpy(X)).numpy()

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return self.model_.autoencoder.decode(torch.as_tensor(np.asarray(Z, dtype=np.float64))).numpy()

    def generate(self, context, horizon=40, n_samples=1, seed=0, **trigger_kw):
        """``n_samples`` traces after ``context`` ``(c, H, W)``; returns a list of GenerationTrace."""
        check_is_fitted(self, "model_")
        context = _check_clips(context, 3, "context")
        cfg = dvg.TriggerConfig(mode=trigger_kw.pop("mode", self.trigger), **trigger_kw)
        seeds = [dvg.trace_seed(seed, 0, k) for k in range(n_samples)]
        ctx = np.repeat(context[None], n_samples, axis=0)
        return dvg.generate_batch(self.model_, ctx, horizon, cfg, seeds)

    def variance_statistic(self, frames):
        check_is_fitted(self, "model_")
        return dvg.variance_statistic(self.model_, frames)
