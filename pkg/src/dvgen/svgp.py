"""Sparse variational GP with inducing points and a Gaussian likelihood.

Outputs are modelled as independent GPs that share one ARD kernel, one noise
variance and one set of inducing locations ``Z``; each output has its own
``q(u) = N(m, S)``.  The variational parameters are stored whitened: with
``K_ZZ = Lz Lz^T`` and ``u = Lz v``, ``q(v) = N(mw, Lw Lw^T)`` and ``Lw`` lower
triangular with a softplus-positive diagonal.  Then ``m = Lz mw`` and
``S = Lz Lw Lw^T Lz^T``; the prior on ``v`` is ``N(0, I)``, which keeps
gradient steps well conditioned when ``K_ZZ`` is nearly singular.  The bound is
the factorized (Hensman) form

    ELBO = (N / B) * sum_i E_q(f_i)[log p(y_i | f_i)] - KL(q(u) || p(u))

summed over outputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DimensionMismatch
from .exact_gp import PredictiveDistribution
from .kernels import ArdKernelParams, kernel_matrix
from .numerics import (DTYPE, AdamState, adam_step, as_tensor, cholesky_factor, flat_function,
                       load_module_vector, log_det_from_cholesky, module_vector, value_and_gradient)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
PAPER_INDUCING = 40
DESK_INDUCING = 16
_VAR_FLOOR = 1e-12


def _inv_softplus(x: torch.Tensor) -> torch.Tensor:
    return x + torch.log(-torch.expm1(-x))


class SvgpModel(nn.Module):
    """Inducing locations, shared kernel and one variational Gaussian per output."""

    def __init__(self, inducing, output_dim: int, kernel: ArdKernelParams | None = None,
                 tied: bool = False, noise_floor: float = 0.0):
        super().__init__()
        if noise_floor < 0:
            raise ValueError("noise_floor must be non-negative")
        self.noise_floor = float(noise_floor)
        Z = as_tensor(inducing).detach().clone()
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise DimensionMismatch("inducing locations must be an (M, d) array with M >= 1")
        if output_dim < 1:
            raise DimensionMismatch("output_dim must be positive")
        kernel = kernel if kernel is not None else ArdKernelParams.default(Z.shape[1], tied=tied)
        kernel.check_dim(Z.shape[1])
        self.log_sigma_ard = nn.Parameter(kernel.log_sigma_ard.detach().clone())
        self.log_omega = nn.Parameter(kernel.log_omega.detach().clone())
        self.log_noise = nn.Parameter(kernel.log_noise.detach().clone())
        self.inducing = nn.Parameter(Z)
        M = Z.shape[0]
        self.q_mu = nn.Parameter(torch.zeros(output_dim, M, dtype=DTYPE))
        self.q_sqrt_raw = nn.Parameter(torch.zeros(output_dim, M, M, dtype=DTYPE))
        self.reset_variational()

    @property
    def num_inducing(self) -> int:
        return self.inducing.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inducing.shape[1]

    @property
    def output_dim(self) -> int:
        return self.q_mu.shape[0]

    @property
    def kernel(self) -> ArdKernelParams:
        log_noise = self.log_noise
        if self.noise_floor > 0:
            # likelihood noise = exp(log_noise) + floor
            log_noise = torch.logaddexp(log_noise, torch.tensor(math.log(self.noise_floor), dtype=DTYPE))
        return ArdKernelParams(self.log_sigma_ard, self.log_omega, log_noise)

    def q_sqrt(self) -> torch.Tensor:
        """Whitened factor ``Lw``, shape ``(d_out, M, M)``."""
        raw = self.q_sqrt_raw
        diag = F.softplus(torch.diagonal(raw, dim1=-2, dim2=-1))
        return torch.tril(raw, diagonal=-1) + torch.diag_embed(diag)

    def prior_cholesky(self) -> torch.Tensor:
        return cholesky_factor(kernel_matrix(self.kernel, self.inducing))

    def q_mean(self) -> torch.Tensor:
        """Mean of ``q(u)``, shape ``(d_out, M)``."""
        return (self.prior_cholesky() @ self.q_mu.T).T

    def q_cov(self) -> torch.Tensor:
        """Covariance of ``q(u)``, shape ``(d_out, M, M)``."""
        L = self.prior_cholesky() @ self.q_sqrt()
        return L @ L.transpose(-1, -2)

    @torch.no_grad()
    def set_variational(self, mean, cov) -> None:
        """Set ``q(u)`` from a mean ``(d_out, M)`` and covariance ``(d_out, M, M)``."""
        mean = as_tensor(mean).expand_as(self.q_mu)
        cov = as_tensor(cov).expand_as(self.q_sqrt_raw)
        Lz = self.prior_cholesky()
        Lu = cholesky_factor(0.5 * (cov + cov.transpose(-1, -2)))
        L = torch.linalg.solve_triangular(Lz.expand_as(Lu), Lu, upper=False)
        raw = torch.tril(L, diagonal=-1) + torch.diag_embed(
            _inv_softplus(torch.diagonal(L, dim1=-2, dim2=-1)))
        self.q_mu.copy_(torch.linalg.solve_triangular(Lz, mean.T, upper=False).T)
        self.q_sqrt_raw.copy_(raw)

    @torch.no_grad()
    def reset_variational(self) -> None:
        """Match ``q(u)`` to the prior: ``m = 0``, ``S = K_ZZ``."""
        self.q_mu.zero_()
        ones = torch.ones(self.q_mu.shape, dtype=DTYPE)
        self.q_sqrt_raw.copy_(torch.diag_embed(_inv_softplus(ones)))


def init_svgp(inputs, output_dim: int, num_inducing: int = DESK_INDUCING, seed: int = 0,
              kernel: ArdKernelParams | None = None, tied: bool = False) -> SvgpModel:
    """Inducing locations drawn at random (without replacement) from ``inputs``."""
    X = as_tensor(inputs)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    idx = rng.choice(n, size=num_inducing, replace=num_inducing > n)
    return SvgpModel(X[np.sort(idx)], output_dim, kernel=kernel, tied=tied)


def _check_inputs(model: SvgpModel, X) -> torch.Tensor:
    X = as_tensor(X)
    if X.ndim == 1:
        X = X.unsqueeze(0)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionMismatch(f"inputs of shape {tuple(X.shape)} for a GP over {model.input_dim} dims")
    return X


def _marginals(model: SvgpModel, X: torch.Tensor):
    """Mean ``(B, d_out)`` and unclamped variance ``(B, d_out)`` of ``q(f)`` at ``X``."""
    kern = model.kernel
    Lz = model.prior_cholesky()
    Kzx = kernel_matrix(kern, model.inducing, X)
    A = torch.linalg.solve_triangular(Lz, Kzx, upper=False)          # Lz^-1 Kzx
    mean = A.T @ model.q_mu.T
    proj = model.q_sqrt().transpose(-1, -2) @ A.unsqueeze(0)          # (d_out, M, B)
    var = kern.signal_variance - (A * A).sum(0) + (proj * proj).sum(1)
    return mean, var.T, Lz


def kl_divergence(model: SvgpModel, Lz: torch.Tensor | None = None) -> torch.Tensor:
    """Per-output ``KL(q(u) || p(u))`` with ``p(u) = N(0, K_ZZ)``.

    Whitening leaves the divergence unchanged, so this is ``KL(q(v) || N(0, I))``;
    ``Lz`` is accepted for call compatibility and not needed.
    """
    Lw = model.q_sqrt()
    M = model.num_inducing
    trace = Lw.pow(2).sum((-1, -2))
    maha = model.q_mu.pow(2).sum(-1)
    return 0.5 * (trace + maha - M - log_det_from_cholesky(Lw))


def variational_entropy(model: SvgpModel) -> torch.Tensor:
    """Per-output entropy ``H[q(u)] = 0.5 log|2 pi e S|``."""
    M = model.num_inducing
    log_det = log_det_from_cholesky(model.prior_cholesky()) + log_det_from_cholesky(model.q_sqrt())
    return 0.5 * (M * (LOG_2PI + 1.0) + log_det)


def expected_log_likelihood(model: SvgpModel, X, Y) -> torch.Tensor:
    """``E_q(f_i)[log N(y_i | f_i, noise)]`` per point and output, shape ``(B, d_out)``."""
    X = _check_inputs(model, X)
    Y = _targets(model, Y, X.shape[0])
    mean, var, _ = _marginals(model, X)
    noise = model.kernel.noise_variance
    return -0.5 * (LOG_2PI + torch.log(noise)) - 0.5 * ((Y - mean) ** 2 + var) / noise


def _targets(model, Y, n):
    Y = as_tensor(Y)
    if Y.ndim == 1:
        Y = Y.unsqueeze(1) if model.output_dim == 1 else Y.unsqueeze(0)
    if Y.shape != (n, model.output_dim):
        raise DimensionMismatch(f"targets of shape {tuple(Y.shape)}, expected ({n}, {model.output_dim})")
    return Y


def elbo(model: SvgpModel, batch_X, batch_Y, dataset_size: int | None = None) -> torch.Tensor:
    """Minibatch estimate of the evidence lower bound, summed over outputs."""
    X = _check_inputs(model, batch_X)
    Y = _targets(model, batch_Y, X.shape[0])
    n = X.shape[0]
    dataset_size = n if dataset_size is None else dataset_size
    if n < 1 or dataset_size < n:
        raise DimensionMismatch(f"batch of {n} points with dataset_size {dataset_size}")
    mean, var, Lz = _marginals(model, X)
    noise = model.kernel.noise_variance
    ell = -0.5 * (LOG_2PI + torch.log(noise)) - 0.5 * ((Y - mean) ** 2 + var) / noise
    return (dataset_size / n) * ell.sum() - kl_divergence(model, Lz).sum()


def predict(model: SvgpModel, queries) -> PredictiveDistribution:
    """Diagonal predictive of the latent function; ``mean`` and ``var`` are ``(Q, d_out)``."""
    X = _check_inputs(model, queries)
    mean, var, _ = _marginals(model, X)
    clamp = float(torch.clamp(-var, min=0.0).max().detach()) if var.numel() else 0.0
    if clamp > 1e-6:
        logger.warning("clamped predictive variance of magnitude %.3g", clamp)
    return PredictiveDistribution(mean, torch.clamp(var, min=0.0))


def reparameterized_sample(model: SvgpModel, queries, eps: torch.Tensor,
                           include_noise: bool = False) -> torch.Tensor:
    """``mean + sqrt(var) * eps`` with gradients flowing into mean and variance.

    ``include_noise`` adds the likelihood noise to the variance, i.e. samples
    the next observation rather than the latent function value.
    """
    X = _check_inputs(model, queries)
    mean, var, _ = _marginals(model, X)
    var = torch.clamp(var, min=0.0)
    if include_noise:
        var = var + model.kernel.noise_variance
    return mean + torch.sqrt(var + _VAR_FLOOR) * eps


def sample(model: SvgpModel, query, rng_seed: int | torch.Generator,
           include_noise: bool = False) -> torch.Tensor:
    """Draw one sample of all outputs at a single query point."""
    gen = rng_seed if isinstance(rng_seed, torch.Generator) else torch.Generator().manual_seed(int(rng_seed))
    eps = torch.randn(model.output_dim, generator=gen, dtype=DTYPE)
    with torch.no_grad():
        dist = predict(model, query)
        var = dist.var[0]
        if include_noise:
            var = var + model.kernel.noise_variance
        return dist.mean[0] + torch.sqrt(var) * eps


@dataclass
class SvgpTrainState:
    adam: AdamState | None = None
    elbo: float = float("nan")
    step: int = 0


def train_step(model: SvgpModel, batch_X, batch_Y, dataset_size: int, lr: float,
               opt_state: SvgpTrainState | None = None) -> tuple[SvgpModel, SvgpTrainState]:
    """One Adam step ascending the ELBO over kernel, inducing and variational parameters.

    The model is updated in place and returned; ``opt_state.elbo`` holds the
    bound evaluated before the step.
    """
    opt_state = opt_state or SvgpTrainState()
    X = _check_inputs(model, batch_X)
    Y = _targets(model, batch_Y, X.shape[0])
    f, _ = flat_function(model, lambda m: -elbo(m, X, Y, dataset_size))
    theta = module_vector(model)
    value, grad = value_and_gradient(f, theta)
    theta, adam = adam_step(theta, grad, opt_state.adam, lr)
    load_module_vector(model, theta)
    return model, SvgpTrainState(adam, -value, opt_state.step + 1)


@torch.no_grad()
def set_optimal_variational(model: SvgpModel, X, Y) -> SvgpModel:
    """Closed-form optimum of the full-batch bound over ``q(u)`` for fixed kernel and ``Z``.

    In whitened form, with ``A = Lz^-1 Kzx``: ``cov(v) = (I + A A^T / s2)^-1``
    and ``mean(v) = cov(v) A y / s2``.
    """
    X = _check_inputs(model, X)
    Y = _targets(model, Y, X.shape[0])
    kern = model.kernel
    s2 = kern.noise_variance
    Lz = model.prior_cholesky()
    A = torch.linalg.solve_triangular(Lz, kernel_matrix(kern, model.inducing, X), upper=False)
    P = torch.eye(model.num_inducing, dtype=DTYPE) + A @ A.T / s2
    Lp = cholesky_factor(0.5 * (P + P.T))
    mw = torch.cholesky_solve(A @ Y / s2, Lp)                            # (M, d_out)
    # Sw = Lp^-T Lp^-1; its lower Cholesky factor comes from flipping Lp^-T
    Lp_inv_T = torch.linalg.solve_triangular(Lp, torch.eye(model.num_inducing, dtype=DTYPE), upper=False).T
    Lw = cholesky_factor(Lp_inv_T @ Lp_inv_T.T)
    raw = torch.tril(Lw, diagonal=-1) + torch.diag_embed(_inv_softplus(torch.diagonal(Lw)))
    model.q_mu.copy_(mw.T)
    model.q_sqrt_raw.copy_(raw.expand_as(model.q_sqrt_raw))
    return model


class SVGPRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :class:`SvgpModel`.

    Parameters
    ----------
    n_inducing : int
        Number of inducing points, initialised from random training inputs.
    n_steps : int
        Adam steps on the ELBO.
    batch_size : int or None
        Minibatch size; ``None`` uses the full dataset each step.
    """

    def __init__(self, n_inducing=DESK_INDUCING, n_steps=500, lr=0.01, batch_size=None,
                 tied=False, random_state=0):
        self.n_inducing = n_inducing
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.tied = tied
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        Y = np.asarray(y, dtype=np.float64)
        self._single_output = Y.ndim == 1
        Y = Y.reshape(len(Y), -1)
        if len(Y) != len(X):
            raise DimensionMismatch(f"{len(X)} inputs but {len(Y)} targets")
        n = len(X)
        model = init_svgp(X, Y.shape[1], min(self.n_inducing, n), seed=self.random_state, tied=self.tied)
        rng = np.random.default_rng(self.random_state)
        Xt, Yt = as_tensor(X), as_tensor(Y)
        batch = n if self.batch_size is None else min(self.batch_size, n)
        # start q(u) at its optimum for the initial kernel; Adam refines the rest
        warm = np.sort(rng.choice(n, size=batch, replace=False)) if batch < n else slice(None)
        set_optimal_variational(model, Xt[warm], Yt[warm])
        state = SvgpTrainState()
        self.elbo_history_ = []
        for _ in range(self.n_steps):
            idx = np.sort(rng.choice(n, size=batch, replace=False)) if batch < n else slice(None)
            model, state = train_step(model, Xt[idx], Yt[idx], n, self.lr, state)
            self.elbo_history_.append(state.elbo)
        self.model_ = model
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        with torch.no_grad():
            dist = predict(self.model_, X)
        mean, std = dist.mean.numpy(), np.sqrt(dist.var.numpy())
        if self._single_output:
            mean, std = mean[:, 0], std[:, 0]
        return (mean, std) if return_std else mean

    def elbo(self, X, y):
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return float(elbo(self.model_, check_array(X, dtype=np.float64),
                              np.asarray(y, dtype=np.float64).reshape(len(X), -1)))
