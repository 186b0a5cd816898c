"""Frame auto-encoder and recurrent latent dynamics.

The auto-encoder is a fully connected stack (frame -> two hidden layers ->
tanh latent) with a mirrored decoder ending in a sigmoid.  The dynamics model
is a linear input projection, two stacked recurrent layers and a tanh output
projection, with RNN, GRU or LSTM cells.

Recurrent state is passed explicitly: ``step`` takes a state and returns the
new one, so a model can drive several rollouts at once.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DimensionMismatch
from .numerics import DTYPE, as_tensor

CELLS = ("rnn", "gru", "lstm")
ACTIVATIONS = {"elu": nn.ELU, "tanh": nn.Tanh, "relu": nn.ReLU, "softplus": nn.Softplus}


@torch.no_grad()
def init_uniform_fan_in(module: nn.Module, generator: torch.Generator) -> None:
    """Every weight matrix and its bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    for name, p in module.named_parameters():
        if p.ndim == 2:
            bound = 1.0 / math.sqrt(p.shape[1])
            p.uniform_(-bound, bound, generator=generator)
    for mod in module.modules():
        if isinstance(mod, nn.Linear) and mod.bias is not None:
            bound = 1.0 / math.sqrt(mod.in_features)
            mod.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(mod, nn.RNNCellBase):
            bound = 1.0 / math.sqrt(mod.input_size)
            for b in (mod.bias_ih, mod.bias_hh):
                if b is not None:
                    b.uniform_(-bound, bound, generator=generator)


class AutoEncoder(nn.Module):
    def __init__(self, height=16, width=16, latent_dim=8, widths=(128, 64), activation="elu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.height, self.width, self.latent_dim = height, width, latent_dim
        act = ACTIVATIONS[activation]
        sizes = [height * width, *widths]
        enc = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            enc += [nn.Linear(a, b, dtype=DTYPE), act()]
        enc += [nn.Linear(sizes[-1], latent_dim, dtype=DTYPE), nn.Tanh()]
        dec = []
        rev = [latent_dim, *widths[::-1]]
        for a, b in zip(rev[:-1], rev[1:]):
            dec += [nn.Linear(a, b, dtype=DTYPE), act()]
        dec += [nn.Linear(rev[-1], height * width, dtype=DTYPE), nn.Sigmoid()]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """``(..., H, W) -> (..., d)``."""
        if tuple(frames.shape[-2:]) != (self.height, self.width):
            raise DimensionMismatch(f"frames of shape {tuple(frames.shape[-2:])}, expected {(self.height, self.width)}")
        lead = frames.shape[:-2]
        return self.encoder(frames.reshape(-1, self.height * self.width)).reshape(*lead, self.latent_dim)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """``(..., d) -> (..., H, W)``."""
        if z.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"latent of size {z.shape[-1]}, expected {self.latent_dim}")
        lead = z.shape[:-1]
        return self.decoder(z.reshape(-1, self.latent_dim)).reshape(*lead, self.height, self.width)


class RecurrentDynamics(nn.Module):
    """``z_t -> z_hat_{t+1}`` through a stack of recurrent cells."""

    def __init__(self, latent_dim=8, hidden=32, cell="lstm", num_layers=2):
        super().__init__()
        cell = cell.lower()
        if cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got {cell!r}")
        self.cell_variant, self.latent_dim, self.hidden, self.num_layers = cell, latent_dim, hidden, num_layers
        self.input_proj = nn.Linear(latent_dim, hidden, dtype=DTYPE)
        make = {"rnn": lambda: nn.RNNCell(hidden, hidden, nonlinearity="tanh", dtype=DTYPE),
                "gru": lambda: nn.GRUCell(hidden, hidden, dtype=DTYPE),
                "lstm": lambda: nn.LSTMCell(hidden, hidden, dtype=DTYPE)}[cell]
        self.cells = nn.ModuleList(make() for _ in range(num_layers))
        self.output_proj = nn.Linear(hidden, latent_dim, dtype=DTYPE)

    def initial_state(self, batch: int = 1) -> tuple:
        zeros = lambda: torch.zeros(batch, self.hidden, dtype=DTYPE)
        if self.cell_variant == "lstm":
            return tuple((zeros(), zeros()) for _ in range(self.num_layers))
        return tuple(zeros() for _ in range(self.num_layers))

    def step(self, z: torch.Tensor, state: tuple) -> tuple[torch.Tensor, tuple]:
        """Advance one step on a ``(B, d)`` batch; returns ``(z_hat_next, new_state)``."""
        if z.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"latent of size {z.shape[-1]}, expected {self.latent_dim}")
        h = self.input_proj(z)
        new_state = []
        for cell, s in zip(self.cells, state):
            s = cell(h, s)
            h = s[0] if self.cell_variant == "lstm" else s
            new_state.append(s)
        return torch.tanh(self.output_proj(h)), tuple(new_state)

    def teacher_forced(self, latents: torch.Tensor) -> torch.Tensor:
        """Predictions for ``z_2..z_T`` given ground-truth ``z_1..z_{T-1}``; ``(B, T, d) -> (B, T-1, d)``."""
        state = self.initial_state(latents.shape[0])
        preds = []
        for t in range(latents.shape[1] - 1):
            z_hat, state = self.step(latents[:, t], state)
            preds.append(z_hat)
        return torch.stack(preds, 1)


def encode_frame(params: AutoEncoder, x) -> torch.Tensor:
    return params.encode(as_tensor(x))


def decode_latent(params: AutoEncoder, z) -> torch.Tensor:
    return params.decode(as_tensor(z))


def reset_state(model: RecurrentDynamics, batch: int = 1) -> tuple:
    return model.initial_state(batch)


def dynamics_step(model: RecurrentDynamics, z, state=None) -> tuple[torch.Tensor, tuple]:
    """One recurrent step for a single latent ``(d,)`` or a batch ``(B, d)``."""
    z = as_tensor(z)
    single = z.ndim == 1
    zb = z.unsqueeze(0) if single else z
    if state is None:
        state = model.initial_state(zb.shape[0])
    z_hat, state = model.step(zb, state)
    return (z_hat[0] if single else z_hat), state


def recurrent_loss(model: RecurrentDynamics, latents) -> torch.Tensor:
    """Teacher-forced ``sum_t ||z_{t+1} - z_hat_{t+1}||^2`` from a reset state.

    ``(T, d)`` gives one sequence's sum; ``(B, T, d)`` averages the per-sequence sums.
    """
    z = as_tensor(latents)
    single = z.ndim == 2
    zb = z.unsqueeze(0) if single else z
    if zb.shape[1] < 2:
        raise ValueError("recurrent_loss needs at least two latents")
    err = ((zb[:, 1:] - model.teacher_forced(zb)) ** 2).sum((1, 2))
    return err[0] if single else err.mean()
