"""The diverse video generator: joint training and trigger-switch rollouts.

Three parts share one latent space: a frame auto-encoder, a recurrent model
of the on-going motion, and a sparse GP over ``z_t -> z_{t+1}`` whose
predictive variance decides when to leave the recurrent prediction and draw
the next latent from the GP instead.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import svgp as svgp_mod
from .dynamics import ACTIVATIONS, CELLS, AutoEncoder, RecurrentDynamics, init_uniform_fan_in
from .errors import DimensionMismatch, NonFiniteValue
from .numerics import DTYPE, AdamState, adam_step, as_tensor, load_module_vector, module_grad_vector, module_vector

logger = logging.getLogger(__name__)

COMPONENTS = ("recon", "lstm_gen", "gp_gen", "lstm", "gp")
DEFAULT_LAMBDAS = (1.0, 1.0, 0.1, 1.0, 0.01)
TRIGGER_MODES = ("none", "fixed", "gp_variance")


@dataclass(frozen=True)
class DvgConfig:
    height: int = 16
    width: int = 16
    latent_dim: int = 8
    ae_widths: tuple = (128, 64)
    activation: str = "elu"
    hidden: int = 32
    cell: str = "lstm"
    num_layers: int = 2
    num_inducing: int = svgp_mod.DESK_INDUCING
    lambdas: tuple = DEFAULT_LAMBDAS
    gp_sample_noise: bool = True
    gp_noise_floor: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ae_widths", tuple(int(w) for w in self.ae_widths))
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if len(self.lambdas) != 5 or any(x < 0 for x in self.lambdas):
            raise ValueError("lambdas must be five non-negative weights")
        if self.latent_dim < 1 or self.hidden < 1 or self.num_inducing < 1 or self.num_layers < 1:
            raise ValueError("latent_dim, hidden, num_layers and num_inducing must be positive")
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")


@dataclass(frozen=True)
class TriggerConfig:
    mode: str = "none"
    fixed_frames: tuple = (15, 35)
    window: int = 10
    std_multiplier: float = 2.0
    std_floor: float = 1e-8
    reset_on_switch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fixed_frames", tuple(int(f) for f in self.fixed_frames))
        if self.mode not in TRIGGER_MODES:
            raise ValueError(f"trigger mode must be one of {TRIGGER_MODES}, got {self.mode!r}")
        if self.window < 2:
            raise ValueError("trigger window must be >= 2")
        if self.std_multiplier <= 0:
            raise ValueError("std_multiplier must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 2e-3
    batch_size: int = 32
    context: int = 5
    predict: int = 10
    seed: int = 0

    @property
    def clip_length(self) -> int:
        return self.context + self.predict


@dataclass
class GenerationTrace:
    frames: np.ndarray
    latents: np.ndarray
    variance_stat: np.ndarray
    switches: list
    seed: int

    @property
    def horizon(self) -> int:
        return len(self.frames)


class DvgModel(nn.Module):
    def __init__(self, config: DvgConfig = DvgConfig()):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.autoencoder = AutoEncoder(config.height, config.width, config.latent_dim,
                                       config.ae_widths, config.activation)
        self.dynamics = RecurrentDynamics(config.latent_dim, config.hidden, config.cell, config.num_layers)
        init_uniform_fan_in(self.autoencoder, gen)
        init_uniform_fan_in(self.dynamics, gen)
        Z = torch.rand(config.num_inducing, config.latent_dim, generator=gen, dtype=DTYPE) - 0.5
        self.gp = svgp_mod.SvgpModel(Z, config.latent_dim, noise_floor=config.gp_noise_floor)

    @property
    def lambdas(self) -> tuple:
        return self.config.lambdas

    @torch.no_grad()
    def init_from_data(self, episodes, clip_length: int, seed: int = 0) -> "DvgModel":
        """Data-dependent start: decoder bias and inducing points.  Call once before training."""
        episodes = as_tensor(episodes)
        self.init_output_bias(episodes)
        self.init_inducing(episodes[:, :clip_length], seed=seed)
        return self

    @torch.no_grad()
    def init_output_bias(self, frames) -> None:
        """Start the decoder at the mean pixel intensity instead of 0.5.

        A sigmoid output at 0.5 on mostly-dark frames first collapses to a
        blank image and sits on that plateau for thousands of steps.
        """
        mean = min(max(float(as_tensor(frames).mean()), 1e-4), 1 - 1e-4)
        self.autoencoder.decoder[-2].bias.fill_(math.log(mean / (1.0 - mean)))

    @torch.no_grad()
    def init_inducing(self, frames, seed: int = 0) -> None:
        """Place inducing points on encoder latents of randomly chosen frames."""
        frames = as_tensor(frames).reshape(-1, self.config.height, self.config.width)
        rng = np.random.default_rng(seed)
        M = self.gp.num_inducing
        idx = np.sort(rng.choice(len(frames), size=M, replace=M > len(frames)))
        self.gp.inducing.copy_(self.autoencoder.encode(frames[idx]))
        self.gp.reset_variational()


def _pairs(z: torch.Tensor):
    """``(B, T, d)`` latents -> flattened ``(z_t, z_{t+1})`` inputs and targets."""
    d = z.shape[-1]
    return z[:, :-1].reshape(-1, d), z[:, 1:].reshape(-1, d)


def joint_loss(model: DvgModel, clips, n_clips_total: int | None = None,
               eps: torch.Tensor | None = None, generator: torch.Generator | None = None):
    """Weighted sum of the five training terms for a batch of clips.

    Frame and recurrent terms are summed over time and pixels per clip and
    averaged over the batch.  The GP term is ``-ELBO / n_clips_total`` with the
    bound's data scaling set to all pairs of ``n_clips_total`` clips, so with a
    single full batch it is exactly ``-ELBO``.  Returns ``(total, components)``.
    """
    x = as_tensor(clips)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    B, T = x.shape[:2]
    if T < 2:
        raise DimensionMismatch("joint_loss needs clips of at least two frames")
    n_clips_total = B if n_clips_total is None else n_clips_total
    ae, dyn, gp = model.autoencoder, model.dynamics, model.gp

    z = ae.encode(x)
    recon = ((x - ae.decode(z)) ** 2).sum((1, 2, 3)).mean()

    z_hat = dyn.teacher_forced(z)
    lstm = ((z[:, 1:] - z_hat) ** 2).sum((1, 2)).mean()
    lstm_gen = ((x[:, 1:] - ae.decode(z_hat)) ** 2).sum((1, 2, 3)).mean()

    inputs, targets = _pairs(z)
    if eps is None:
        eps = torch.randn(inputs.shape, generator=generator, dtype=DTYPE)
    z_tilde = svgp_mod.reparameterized_sample(gp, inputs, eps, model.config.gp_sample_noise)
    gp_gen = ((x[:, 1:] - ae.decode(z_tilde.reshape(B, T - 1, -1))) ** 2).sum((1, 2, 3)).mean()
    neg_elbo = -svgp_mod.elbo(gp, inputs, targets, dataset_size=n_clips_total * (T - 1)) / n_clips_total

    components = dict(zip(COMPONENTS, (recon, lstm_gen, gp_gen, lstm, neg_elbo)))
    total = sum(w * components[c] for w, c in zip(model.lambdas, COMPONENTS))
    return total, components


def _windows(episodes: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    n, T = episodes.shape[:2]
    if T < length:
        raise DimensionMismatch(f"episodes have {T} frames, training needs {length}")
    starts = rng.integers(0, T - length + 1, size=n)
    return np.stack([episodes[i, s:s + length] for i, s in enumerate(starts)])


def train(model: DvgModel, episodes, config: TrainConfig = TrainConfig(), log_every: int = 0):
    """Adam on all parameters of the joint objective.

    Every epoch draws one random ``context + predict`` window per episode.
    Returns ``(model, log)`` where ``log`` holds per-epoch mean components.
    Parameters are used as given; see :meth:`DvgModel.init_from_data`.
    """
    model, log, _ = train_resumable(model, episodes, config, log_every=log_every)
    return model, log


def epoch_generators(seed: int, epoch: int) -> tuple[np.random.Generator, torch.Generator]:
    """Window/order RNG and reparameterization RNG for one epoch."""
    ss = np.random.SeedSequence([int(seed), int(epoch)])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), torch.Generator().manual_seed(int(b.generate_state(1)[0]))


def train_resumable(model: DvgModel, episodes, config: TrainConfig = TrainConfig(),
                    opt_state: AdamState | None = None, start_epoch: int = 0, log_every: int = 0):
    """:func:`train` that can continue from ``(opt_state, start_epoch)``.

    Randomness is derived per epoch from ``(seed, epoch)``, so a run split
    across a resume is bit-identical to one uninterrupted run.  Returns
    ``(model, log, opt_state)``.
    """
    episodes = np.asarray(episodes, dtype=np.float64)
    n = len(episodes)
    if n == 0:
        raise ValueError("no training episodes")
    if episodes.shape[1] < config.clip_length:
        raise ValueError(f"episodes of length {episodes.shape[1]} are shorter than "
                         f"context + predict = {config.clip_length}")
    if opt_state is None and start_epoch != 0:
        raise ValueError("resuming past epoch 0 needs the optimizer state")
    theta = module_vector(model)
    state = opt_state if opt_state is not None else AdamState.zeros_like(theta)
    log = []
    for epoch in range(start_epoch, config.epochs):
        rng, gen = epoch_generators(config.seed, epoch)
        clips = _windows(episodes, config.clip_length, rng)
        order = rng.permutation(n)
        sums = dict.fromkeys(("total",) + COMPONENTS, 0.0)
        batches = 0
        for start in range(0, n, config.batch_size):
            batch = torch.from_numpy(clips[np.sort(order[start:start + config.batch_size])])
            model.zero_grad(set_to_none=True)
            total, comps = joint_loss(model, batch, n_clips_total=n, generator=gen)
            _check_finite(total, comps)
            total.backward()
            grad = module_grad_vector(model)
            if not torch.isfinite(grad).all():
                raise NonFiniteValue("gradient of the joint loss is not finite", component="gradient")
            theta, state = adam_step(theta, grad, state, config.lr)
            load_module_vector(model, theta)
            sums["total"] += float(total.detach())
            for c in COMPONENTS:
                sums[c] += float(comps[c].detach())
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        log.append(row)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("epoch %d total %.4f %s", epoch, row["total"],
                        " ".join(f"{c}={row[c]:.4f}" for c in COMPONENTS))
    model.zero_grad(set_to_none=True)
    return model, log, state


def _check_finite(total, comps):
    if torch.isfinite(total):
        return
    for c in COMPONENTS:
        if not torch.isfinite(comps[c]):
            raise NonFiniteValue(f"loss component {c!r} is not finite", component=c)
    raise NonFiniteValue("total loss is not finite", component="total")


def trigger_decision(cfg: TriggerConfig, history, current: float, step: int) -> bool:
    """Whether generated step ``step`` switches to a GP sample.

    ``history`` holds the variance statistic of earlier states, oldest first;
    only its last ``cfg.window`` entries are used, with population std.
    """
    if not math.isfinite(current):
        raise NonFiniteValue(f"variance statistic {current} is not finite")
    if cfg.mode == "none":
        return False
    if cfg.mode == "fixed":
        return step in cfg.fixed_frames
    if len(history) < cfg.window:
        return False
    recent = np.asarray(history[-cfg.window:], dtype=np.float64)
    threshold = recent.mean() + cfg.std_multiplier * max(recent.std(), cfg.std_floor)
    return bool(current > threshold)


def _trigger_mask(cfg: TriggerConfig, history: np.ndarray, current: np.ndarray, step: int) -> np.ndarray:
    """Vectorised :func:`trigger_decision` over a batch; ``history`` is ``(B, n)``."""
    B = len(current)
    if cfg.mode == "none":
        return np.zeros(B, dtype=bool)
    if cfg.mode == "fixed":
        return np.full(B, step in cfg.fixed_frames)
    if history.shape[1] < cfg.window:
        return np.zeros(B, dtype=bool)
    recent = history[:, -cfg.window:]
    threshold = recent.mean(1) + cfg.std_multiplier * np.maximum(recent.std(1), cfg.std_floor)
    return current > threshold


def trace_noise(seed: int, horizon: int, dim: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(horizon, dim, generator=gen, dtype=DTYPE)


@torch.no_grad()
def generate_batch(model: DvgModel, contexts, horizon: int, cfg: TriggerConfig, seeds) -> list[GenerationTrace]:
    """Closed-loop rollouts for a batch of contexts ``(B, c, H, W)``, one seed each."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = as_tensor(contexts)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    B, c = x.shape[:2]
    seeds = [int(s) for s in seeds]
    if len(seeds) != B:
        raise DimensionMismatch(f"{B} contexts but {len(seeds)} seeds")
    if c < 1:
        raise ValueError("need at least one context frame")
    ae, dyn, gp = model.autoencoder, model.dynamics, model.gp
    d = model.config.latent_dim
    eps = torch.stack([trace_noise(s, horizon, d) for s in seeds])
    noise = gp.kernel.noise_variance if model.config.gp_sample_noise else 0.0

    z_ctx = ae.encode(x)
    state = dyn.initial_state(B)
    for t in range(c):
        z_hat, state = dyn.step(z_ctx[:, t], state)
    history = svgp_mod.predict(gp, z_ctx[:, :-1].reshape(-1, d)).var.mean(1).reshape(B, c - 1).numpy()
    z_cur = z_ctx[:, -1]

    frames = np.empty((B, horizon, model.config.height, model.config.width))
    latents = np.empty((B, horizon, d))
    stats = np.empty((B, horizon))
    switches = [[] for _ in range(B)]
    for s in range(horizon):
        dist = svgp_mod.predict(gp, z_cur)
        stat = dist.var.mean(1).numpy()
        switch = _trigger_mask(cfg, history, stat, s)
        z_next = z_hat
        if switch.any():
            z_gp = dist.mean + torch.sqrt(dist.var + noise) * eps[:, s]
            mask = torch.from_numpy(switch).unsqueeze(1)
            z_next = torch.where(mask, z_gp, z_hat)
            for b in np.flatnonzero(switch):
                switches[b].append((s, cfg.mode))
        frame = ae.decode(z_next)
        z_cur = ae.encode(frame)
        if cfg.reset_on_switch and switch.any():
            state = _reset_rows(dyn, state, switch)
        z_hat, state = dyn.step(z_cur, state)
        frames[:, s] = frame.numpy()
        latents[:, s] = z_next.numpy()
        stats[:, s] = stat
        history = np.concatenate([history, stat[:, None]], axis=1)
    return [GenerationTrace(frames[b], latents[b], stats[b], switches[b], seeds[b]) for b in range(B)]


def _reset_rows(dyn, state, mask):
    keep = torch.from_numpy(~mask).to(DTYPE).unsqueeze(1)
    if dyn.cell_variant == "lstm":
        return tuple((h * keep, cc * keep) for h, cc in state)
    return tuple(h * keep for h in state)


def generate(model: DvgModel, context, horizon: int, cfg: TriggerConfig = TriggerConfig(),
             seed: int = 0) -> GenerationTrace:
    """Roll out ``horizon`` frames after ``context`` (``(c, H, W)``)."""
    context = as_tensor(context)
    if context.ndim != 3:
        raise DimensionMismatch("context must be a (c, H, W) stack of frames")
    return generate_batch(model, context.unsqueeze(0), horizon, cfg, [seed])[0]


@torch.no_grad()
def variance_statistic(model: DvgModel, frames) -> np.ndarray:
    """Trigger statistic (mean predictive variance over latent dims) for each frame."""
    frames = as_tensor(frames)
    lead = frames.shape[:-2]
    z = model.autoencoder.encode(frames).reshape(-1, model.config.latent_dim)
    return svgp_mod.predict(model.gp, z).var.mean(1).reshape(lead).numpy()


def trace_seed(base_seed: int, context_id: int, sample_id: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(context_id), int(sample_id)]).generate_state(1)[0])


def config_dict(cfg) -> dict:
    return asdict(cfg)
