"""Closed-form Gaussian-process regression with a zero mean function.

This is the reference path that the sparse variational model is checked
against, so it stays deliberately plain: one Cholesky of ``K + noise*I`` and
triangular solves.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .errors import DimensionMismatch, NonFiniteValue
from .kernels import ArdKernelParams, kernel_matrix
from .numerics import (AdamState, adam_step, as_tensor, cholesky_factor,
                       log_det_from_cholesky, solve_psd, value_and_gradient)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpDataset:
    X: torch.Tensor
    Y: torch.Tensor

    def __post_init__(self):
        X = as_tensor(self.X)
        Y = as_tensor(self.Y).reshape(-1)
        if X.ndim == 1:
            X = X.unsqueeze(1)
        if X.shape[0] < 1:
            raise DimensionMismatch("a GP dataset needs at least one point")
        if X.shape[0] != Y.shape[0]:
            raise DimensionMismatch(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
        if not (torch.isfinite(X).all() and torch.isfinite(Y).all()):
            raise NonFiniteValue("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class ExactGpModel:
    kernel: ArdKernelParams
    data: GpDataset

    def __post_init__(self):
        self.kernel.check_dim(self.data.dim)


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: torch.Tensor
    var: torch.Tensor
    cov: torch.Tensor | None = None


def _noisy_gram(kernel, X):
    K = kernel_matrix(kernel, X)
    return K + kernel.noise_variance * torch.eye(X.shape[0], dtype=K.dtype)


def predict(model: ExactGpModel, queries, full_cov: bool = True) -> PredictiveDistribution:
    """Posterior mean and covariance of ``f`` at ``queries``."""
    Xq = as_tensor(queries)
    if Xq.ndim == 1:
        Xq = Xq.unsqueeze(1) if model.data.dim == 1 else Xq.unsqueeze(0)
    if Xq.shape[1] != model.data.dim:
        raise DimensionMismatch(f"queries have dimension {Xq.shape[1]}, model expects {model.data.dim}")
    kern, X, Y = model.kernel, model.data.X, model.data.Y
    L = cholesky_factor(_noisy_gram(kern, X))
    Kqx = kernel_matrix(kern, Xq, X)
    mean = Kqx @ solve_psd(L, Y)
    V = torch.linalg.solve_triangular(L, Kqx.T, upper=False)
    if full_cov:
        cov = kernel_matrix(kern, Xq) - V.T @ V
        cov = 0.5 * (cov + cov.T)
        var = torch.clamp(torch.diagonal(cov), min=0.0)
        return PredictiveDistribution(mean, var, cov)
    var = kern.signal_variance - (V * V).sum(0)
    return PredictiveDistribution(mean, torch.clamp(var, min=0.0))


def log_marginal_likelihood(model: ExactGpModel) -> torch.Tensor:
    """``-0.5 (y^T (K+s^2 I)^-1 y + log|K+s^2 I|) - (n/2) log 2 pi``."""
    X, Y = model.data.X, model.data.Y
    L = cholesky_factor(_noisy_gram(model.kernel, X))
    alpha = torch.linalg.solve_triangular(L, Y.unsqueeze(1), upper=False).squeeze(1)
    return -0.5 * (alpha @ alpha) - 0.5 * log_det_from_cholesky(L) - 0.5 * X.shape[0] * LOG_2PI


def fit_hyperparameters(model: ExactGpModel, steps: int, lr: float = 0.05,
                        max_halvings: int = 10) -> tuple[ExactGpModel, list[float]]:
    """Adam ascent on the log marginal likelihood over the kernel parameters.

    A step that lowers the objective is rolled back and retried with half the
    learning rate, so the returned model never scores below the input one.
    Returns the fitted model and the accepted objective values.
    """
    if steps < 1:
        raise ValueError("fit_hyperparameters needs steps >= 1")
    data = model.data

    def neg_lml(vec):
        return -log_marginal_likelihood(ExactGpModel(ArdKernelParams.from_vector(vec), data))

    theta = model.kernel.to_vector().detach().clone()
    value, grad = value_and_gradient(neg_lml, theta)
    history = [-value]
    state = AdamState.zeros_like(theta)
    step_lr = lr
    for _ in range(steps):
        accepted = False
        for _ in range(max_halvings + 1):
            cand, cand_state = adam_step(theta, grad, state, step_lr)
            try:
                cand_value, cand_grad = value_and_gradient(neg_lml, cand)
            except (NonFiniteValue, ValueError):
                step_lr *= 0.5
                continue
            if cand_value <= value:
                theta, value, grad, state = cand, cand_value, cand_grad, cand_state
                accepted = True
                break
            step_lr *= 0.5
        if not accepted:
            logger.debug("no improving step after %d halvings; stopping", max_halvings)
            break
        history.append(-value)
    if not math.isfinite(value):
        raise NonFiniteValue("log marginal likelihood became non-finite")
    return replace(model, kernel=ArdKernelParams.from_vector(theta)), history


class ExactGPRegressor(RegressorMixin, BaseEstimator):
    """Exact GP regression with an ARD kernel, single output.

    Targets are centred on their training mean before fitting and the mean is
    added back at prediction time.

    Parameters
    ----------
    n_steps : int
        Hyperparameter ascent steps; 0 keeps the initial kernel.
    lr : float
        Initial Adam learning rate for the hyperparameters.
    tied : bool
        Share one relevance weight across input dimensions (plain RBF).
    """

    def __init__(self, n_steps=100, lr=0.05, tied=False, center_targets=True):
        self.n_steps = n_steps
        self.lr = lr
        self.tied = tied
        self.center_targets = center_targets

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.y_mean_ = float(y.mean()) if self.center_targets else 0.0
        data = GpDataset(X, y - self.y_mean_)
        model = ExactGpModel(ArdKernelParams.default(X.shape[1], tied=self.tied), data)
        self.lml_history_ = [float(log_marginal_likelihood(model))]
        if self.n_steps > 0:
            model, self.lml_history_ = fit_hyperparameters(model, self.n_steps, self.lr)
        self.model_ = model
        self.kernel_ = model.kernel
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False, return_cov=False):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        with torch.no_grad():
            dist = predict(self.model_, X, full_cov=return_cov)
        mean = dist.mean.numpy() + self.y_mean_
        if return_cov:
            return mean, dist.cov.numpy()
        if return_std:
            return mean, np.sqrt(dist.var.numpy())
        return mean

    def log_marginal_likelihood(self):
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return float(log_marginal_likelihood(self.model_))
