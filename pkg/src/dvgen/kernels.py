"""Squared-exponential kernel with automatic relevance determination.

    k(z, z') = sigma^2 * exp(-0.5 * sum_j omega_j (z_j - z'_j)^2)

All positive hyperparameters are stored as logs so that gradient steps are
unconstrained.  A single shared ``omega`` (``log_omega`` of length 1) gives
the isotropic RBF kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DimensionMismatch
from .numerics import DTYPE, as_tensor

DEFAULT_LOG_NOISE = math.log(0.01)


@dataclass(frozen=True)
class ArdKernelParams:
    log_sigma_ard: torch.Tensor
    log_omega: torch.Tensor
    log_noise: torch.Tensor

    def __post_init__(self):
        for name in ("log_sigma_ard", "log_omega", "log_noise"):
            value = getattr(self, name)
            if not isinstance(value, torch.Tensor) or value.dtype != DTYPE:
                object.__setattr__(self, name, as_tensor(value))
        if self.log_sigma_ard.ndim != 0 or self.log_noise.ndim != 0:
            raise DimensionMismatch("log_sigma_ard and log_noise must be scalars")
        if self.log_omega.ndim != 1 or self.log_omega.numel() < 1:
            raise DimensionMismatch("log_omega must be a non-empty vector")

    @classmethod
    def default(cls, dim: int, tied: bool = False) -> "ArdKernelParams":
        return cls(torch.tensor(0.0, dtype=DTYPE),
                   torch.zeros(1 if tied else dim, dtype=DTYPE),
                   torch.tensor(DEFAULT_LOG_NOISE, dtype=DTYPE))

    @classmethod
    def from_values(cls, sigma_ard=1.0, omega=(1.0,), noise_variance=0.01) -> "ArdKernelParams":
        omega = torch.as_tensor(omega, dtype=DTYPE).reshape(-1)
        return cls(torch.log(torch.tensor(float(sigma_ard), dtype=DTYPE)),
                   torch.log(omega),
                   torch.log(torch.tensor(float(noise_variance), dtype=DTYPE)))

    @property
    def tied(self) -> bool:
        return self.log_omega.numel() == 1

    @property
    def signal_variance(self) -> torch.Tensor:
        return torch.exp(2.0 * self.log_sigma_ard)

    @property
    def omega(self) -> torch.Tensor:
        return torch.exp(self.log_omega)

    @property
    def noise_variance(self) -> torch.Tensor:
        return torch.exp(self.log_noise)

    def to_vector(self) -> torch.Tensor:
        return torch.cat([self.log_sigma_ard.reshape(1), self.log_omega, self.log_noise.reshape(1)])

    @classmethod
    def from_vector(cls, vec: torch.Tensor) -> "ArdKernelParams":
        return cls(vec[0], vec[1:-1], vec[-1])

    def detach(self) -> "ArdKernelParams":
        return ArdKernelParams(self.log_sigma_ard.detach().clone(), self.log_omega.detach().clone(),
                               self.log_noise.detach().clone())

    def check_dim(self, dim: int) -> None:
        if not self.tied and self.log_omega.numel() != dim:
            raise DimensionMismatch(
                f"kernel has {self.log_omega.numel()} relevance weights but inputs have dimension {dim}"
            )


def _rows(A) -> torch.Tensor:
    A = as_tensor(A)
    if A.ndim == 1:
        A = A.unsqueeze(0)
    if A.ndim != 2:
        raise DimensionMismatch(f"expected a list of vectors, got shape {tuple(A.shape)}")
    return A


def kernel_matrix(params: ArdKernelParams, A, B=None) -> torch.Tensor:
    """Gram matrix with entry ``(i, j) = k(A_i, B_j)``; ``B`` defaults to ``A``."""
    A = _rows(A)
    B = A if B is None else _rows(B)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"point dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    params.check_dim(A.shape[1])
    # explicit differences keep K(A, A) exactly symmetric with an exact diagonal
    diff = A.unsqueeze(1) - B.unsqueeze(0)
    sq = (diff * diff * params.omega).sum(-1)
    return params.signal_variance * torch.exp(-0.5 * sq)


def kernel_eval(params: ArdKernelParams, z, z2) -> torch.Tensor:
    z = as_tensor(z)
    z2 = as_tensor(z2)
    if z.ndim != 1 or z.shape != z2.shape:
        raise DimensionMismatch(f"kernel_eval needs two vectors of equal length, got {tuple(z.shape)} and {tuple(z2.shape)}")
    return kernel_matrix(params, z, z2)[0, 0]


def kernel_diag(params: ArdKernelParams, A) -> torch.Tensor:
    A = _rows(A)
    params.check_dim(A.shape[1])
    return params.signal_variance.expand(A.shape[0])
