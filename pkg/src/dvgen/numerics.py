"""Dense float64 linear algebra, gradients and the Adam update.

Matrices and vectors are ``torch.Tensor`` objects in float64 so that every
loss in the package can be differentiated by autograd.  Anything array-like
is accepted on input and converted with :func:`as_tensor`.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import DimensionMismatch, NonFiniteValue, NotPositiveDefinite

logger = logging.getLogger(__name__)

DTYPE = torch.float64
JITTER_SCHEDULE = (1e-8, 1e-6, 1e-4)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def cholesky_factor(m, jitter_schedule=JITTER_SCHEDULE) -> torch.Tensor:
    """Lower Cholesky factor of a symmetric matrix (or a batch of them).

    On failure the diagonal is perturbed by each jitter in ``jitter_schedule``
    in turn before giving up with :class:`NotPositiveDefinite`.
    """
    m = as_tensor(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionMismatch(f"cholesky_factor needs square matrices, got {tuple(m.shape)}")
    with torch.no_grad():
        scale = max(1.0, float(m.abs().max())) if m.numel() else 1.0
        asym = float((m - m.transpose(-1, -2)).abs().max()) if m.numel() else 0.0
    if asym > 1e-10 * scale:
        raise DimensionMismatch(f"matrix is not symmetric (max asymmetry {asym:.3g})")

    L, info = torch.linalg.cholesky_ex(m)
    if not bool(info.any()):
        return L
    eye = torch.eye(m.shape[-1], dtype=m.dtype)
    for jitter in jitter_schedule:
        L, info = torch.linalg.cholesky_ex(m + jitter * eye)
        if not bool(info.any()):
            logger.debug("cholesky succeeded with jitter %g", jitter)
            return L
    last = f" after jitter {jitter_schedule[-1]:g}" if jitter_schedule else ""
    raise NotPositiveDefinite(f"matrix of size {m.shape[-1]} is not positive definite{last}")


def solve_psd(chol, b) -> torch.Tensor:
    """Solve ``(L L^T) x = b`` given the lower factor ``L``; ``b`` may be a vector."""
    chol = as_tensor(chol)
    b = as_tensor(b)
    vector = b.ndim == chol.ndim - 1
    rhs = b.unsqueeze(-1) if vector else b
    if rhs.shape[-2] != chol.shape[-1]:
        raise DimensionMismatch(
            f"factor is {tuple(chol.shape)} but right-hand side is {tuple(b.shape)}"
        )
    x = torch.cholesky_solve(rhs, chol, upper=False)
    return x.squeeze(-1) if vector else x


def log_det_from_cholesky(chol: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)


def value_and_gradient(f: Callable[[torch.Tensor], torch.Tensor], p) -> tuple[float, torch.Tensor]:
    """Evaluate scalar ``f`` at the flat parameter vector ``p`` and its gradient.

    Reverse-mode through torch autograd.  Raises :class:`NonFiniteValue` when
    the value or any partial derivative is not finite.
    """
    x = as_tensor(p).detach().clone().requires_grad_(True)
    value = f(x)
    if value.ndim != 0:
        raise DimensionMismatch("value_and_gradient needs a scalar-valued function")
    if not torch.isfinite(value):
        raise NonFiniteValue(f"function value is {float(value.detach())}")
    grad = None
    if value.requires_grad:
        (grad,) = torch.autograd.grad(value, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    if not torch.isfinite(grad).all():
        bad = torch.nonzero(~torch.isfinite(grad)).flatten().tolist()
        raise NonFiniteValue(f"non-finite partial derivatives at indices {bad[:10]}")
    return float(value.detach()), grad.detach()


def finite_difference_gradient(f, p, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences with ``h_i = rel_step * max(1, |p_i|)``; no autograd involved."""
    p = np.asarray(as_tensor(p).detach().numpy(), dtype=np.float64).copy()
    grad = np.empty_like(p)
    with torch.no_grad():
        for i in range(p.size):
            h = rel_step * max(1.0, abs(p[i]))
            orig = p[i]
            p[i] = orig + h
            f_plus = float(f(torch.from_numpy(p.copy())))
            p[i] = orig - h
            f_minus = float(f(torch.from_numpy(p.copy())))
            p[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_gradient_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(as_tensor(analytic).detach().numpy())
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


@dataclass(frozen=True)
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0

    @classmethod
    def zeros_like(cls, p) -> "AdamState":
        p = as_tensor(p)
        return cls(torch.zeros_like(p), torch.zeros_like(p), 0)


def adam_step(p, g, state: AdamState | None, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam descent step; returns new tensors, inputs untouched."""
    p = as_tensor(p).detach()
    g = as_tensor(g).detach()
    if p.shape != g.shape:
        raise DimensionMismatch(f"parameter shape {tuple(p.shape)} != gradient shape {tuple(g.shape)}")
    if state is None:
        state = AdamState.zeros_like(p)
    if state.m.shape != p.shape:
        raise DimensionMismatch("optimizer state does not match parameter shape")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    p_new = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return p_new, AdamState(m, v, t)


class ParamLayout:
    """Ordered ``name -> (offset, shape)`` map describing a flat parameter vector."""

    def __init__(self, shapes: Mapping[str, tuple[int, ...]]):
        self.entries: "OrderedDict[str, tuple[int, tuple[int, ...]]]" = OrderedDict()
        offset = 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            self.entries[name] = (offset, shape)
            offset += int(np.prod(shape, dtype=np.int64)) if shape else 1
        self.size = offset

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamLayout":
        return cls(OrderedDict((n, tuple(p.shape)) for n, p in module.named_parameters()))

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def slice(self, name: str) -> slice:
        offset, shape = self.entries[name]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return slice(offset, offset + n)

    def flatten(self, tensors: Mapping[str, torch.Tensor]) -> torch.Tensor:
        missing = set(self.entries) - set(tensors)
        if missing:
            raise DimensionMismatch(f"missing parameters: {sorted(missing)}")
        parts = []
        for name, (_, shape) in self.entries.items():
            t = as_tensor(tensors[name])
            if tuple(t.shape) != shape:
                raise DimensionMismatch(f"{name}: expected shape {shape}, got {tuple(t.shape)}")
            parts.append(t.reshape(-1))
        return torch.cat(parts) if parts else torch.zeros(0, dtype=DTYPE)

    def unflatten(self, vec: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        vec = as_tensor(vec)
        if vec.shape != (self.size,):
            raise DimensionMismatch(f"expected flat vector of length {self.size}, got {tuple(vec.shape)}")
        return OrderedDict((name, vec[self.slice(name)].reshape(shape))
                           for name, (_, shape) in self.entries.items())

    def to_manifest(self) -> list[dict]:
        return [{"name": n, "offset": o, "shape": list(s)} for n, (o, s) in self.entries.items()]

    @classmethod
    def from_manifest(cls, manifest) -> "ParamLayout":
        layout = cls(OrderedDict((e["name"], tuple(e["shape"])) for e in manifest))
        for e in manifest:
            if layout.entries[e["name"]][0] != e["offset"]:
                raise DimensionMismatch(f"manifest offset mismatch for {e['name']}")
        return layout


def module_vector(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def module_grad_vector(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1)
        for p in module.parameters()
    ])


@torch.no_grad()
def load_module_vector(module: torch.nn.Module, vec: torch.Tensor) -> None:
    offset = 0
    for p in module.parameters():
        n = p.numel()
        p.copy_(vec[offset:offset + n].reshape(p.shape))
        offset += n
    if offset != vec.numel():
        raise DimensionMismatch(f"vector length {vec.numel()} != parameter count {offset}")


def flat_function(module: torch.nn.Module, loss: Callable[[torch.nn.Module], torch.Tensor]):
    """Turn ``loss(module)`` into a function of the module's flat parameter vector."""
    layout = ParamLayout.from_module(module)

    def f(vec):
        return _call_with(module, layout.unflatten(vec), loss)

    return f, layout


def _call_with(module, params, loss):
    # functional_call only swaps parameters during a forward(); route the loss through a shim.
    shim = _LossShim(module, loss)
    prefixed = {f"inner.{k}": v for k, v in params.items()}
    return torch.func.functional_call(shim, prefixed, ())


class _LossShim(torch.nn.Module):
    def __init__(self, inner, loss):
        super().__init__()
        self.inner = inner
        self._loss = loss

    def forward(self):
        return self._loss(self.inner)
