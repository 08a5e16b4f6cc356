"""Few-step denoising GAN over latent vectors.

The generator predicts a clean latent x0' from (x_t, t, z, class); the
previous noisy state is then drawn from the analytic posterior
q(x_{t-1} | x_t, x0').  The time-dependent discriminator judges
(x_{t-1}, x_t, t, class) pairs.  Sampling needs exactly T generator
evaluations per batch of samples.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion_core import DiffusionSchedule, forward_step, marginal, posterior_params
from .errors import DomainError, TrainingDivergedError


def time_embedding(t, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of the (small) step index; distinct for distinct t."""
    if isinstance(t, int):
        t = torch.tensor([t])
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=dtype)], dim=-1)
    return emb


def embed_condition(class_ids: torch.Tensor, table: nn.Embedding) -> torch.Tensor:
    """Row lookup with an explicit range check."""
    if class_ids.numel() and (int(class_ids.min()) < 0
                              or int(class_ids.max()) >= table.num_embeddings):
        raise DomainError(f"class id outside [0, {table.num_embeddings})")
    return table(class_ids)


def _mlp(in_dim: int, hidden: int, depth: int, out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(depth):
        layers += [nn.Linear(d, hidden), nn.LeakyReLU(0.2)]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """Predicts x0' from [x_t | time emb | condition emb | z]."""

    def __init__(self, latent_dim: int, n_classes: int, z_dim: int = 32,
                 emb_dim: int = 64, hidden: int = 256, depth: int = 3):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_classes = n_classes
        self.z_dim = z_dim
        self.emb_dim = emb_dim
        self.condition = nn.Embedding(n_classes, emb_dim)
        self.trunk = _mlp(latent_dim + 2 * emb_dim + z_dim, hidden, depth, latent_dim)

    def forward(self, x_t: torch.Tensor, t, z: torch.Tensor,
                class_ids: torch.Tensor) -> torch.Tensor:
        if x_t.shape[-1] != self.latent_dim or z.shape[-1] != self.z_dim:
            raise DomainError(f"generator input dims ({x_t.shape[-1]}, {z.shape[-1]}) != "
                              f"({self.latent_dim}, {self.z_dim})")
        te = time_embedding(t, self.emb_dim, x_t.dtype)
        if te.shape[0] == 1:
            te = te.expand(x_t.shape[0], -1)
        ce = embed_condition(class_ids, self.condition).to(x_t.dtype)
        return self.trunk(torch.cat([x_t, te, ce, z], dim=-1))


class Discriminator(nn.Module):
    """Scalar logit for whether x_{t-1} is a plausible denoising of x_t."""

    def __init__(self, latent_dim: int, n_classes: int, emb_dim: int = 64,
                 hidden: int = 256, depth: int = 3):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_classes = n_classes
        self.emb_dim = emb_dim
        self.condition = nn.Embedding(n_classes, emb_dim)
        self.trunk = _mlp(2 * latent_dim + 2 * emb_dim, hidden, depth, 1)

    def forward(self, x_prev: torch.Tensor, x_t: torch.Tensor, t,
                class_ids: torch.Tensor) -> torch.Tensor:
        te = time_embedding(t, self.emb_dim, x_t.dtype)
        if te.shape[0] == 1:
            te = te.expand(x_t.shape[0], -1)
        ce = embed_condition(class_ids, self.condition).to(x_t.dtype)
        return self.trunk(torch.cat([x_prev, x_t, te, ce], dim=-1)).squeeze(-1)


# ----------------------------------------------------------------------
# Losses (fake-pair construction shared by both)
# ----------------------------------------------------------------------

def _real_pair(x0: torch.Tensor, t: torch.Tensor, schedule: DiffusionSchedule,
               rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    x_prev = marginal(x0, t - 1, schedule, rng)   # t-1 = 0 collapses to x0 itself
    x_t = forward_step(x_prev, t, schedule, rng)
    return x_prev, x_t


def _fake_prev(x_t: torch.Tensor, t: torch.Tensor, class_ids: torch.Tensor,
               generator: Generator, schedule: DiffusionSchedule,
               rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Predict x0' and sample the posterior, reparameterized so gradients flow.

    The posterior variance is schedule-only (no gradient), so the t=1
    degenerate step (variance 0) is safe.
    """
    z = torch.randn(x_t.shape[0], generator.z_dim, generator=rng, dtype=x_t.dtype)
    x0_pred = generator(x_t, t, z, class_ids)
    mean, var = posterior_params(x0_pred, x_t, t, schedule)
    eps = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return x0_pred, mean + torch.sqrt(var) * eps


def _check_batch(x0: torch.Tensor, class_ids: torch.Tensor) -> None:
    if x0.dim() != 2 or x0.shape[0] == 0:
        raise DomainError(f"x0 must be a non-empty [B, d] batch, got {tuple(x0.shape)}")
    if class_ids.shape != (x0.shape[0],):
        raise DomainError("class_ids must align with the batch")


def d_loss(x0: torch.Tensor, class_ids: torch.Tensor, generator: Generator,
           discriminator: Discriminator, schedule: DiffusionSchedule,
           rng: torch.Generator, r1_gamma: float = 0.05) -> tuple[torch.Tensor, dict]:
    """Discriminator loss: real pairs vs detached fake pairs, plus R1 penalty."""
    _check_batch(x0, class_ids)
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=rng)
    x_prev_real, x_t = _real_pair(x0, t, schedule, rng)
    with torch.no_grad():
        _, x_prev_fake = _fake_prev(x_t, t, class_ids, generator, schedule, rng)

    x_prev_real = x_prev_real.requires_grad_(True)
    logit_real = discriminator(x_prev_real, x_t, t, class_ids)
    logit_fake = discriminator(x_prev_fake, x_t, t, class_ids)
    loss = F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()
    if r1_gamma > 0:
        grad, = torch.autograd.grad(logit_real.sum(), x_prev_real, create_graph=True)
        loss = loss + 0.5 * r1_gamma * grad.pow(2).sum(dim=1).mean()
    stats = {"d_real": torch.sigmoid(logit_real).mean().item(),
             "d_fake": torch.sigmoid(logit_fake).mean().item()}
    return loss, stats


def g_loss(x0: torch.Tensor, class_ids: torch.Tensor, generator: Generator,
           discriminator: Discriminator, schedule: DiffusionSchedule,
           rng: torch.Generator) -> torch.Tensor:
    """Non-saturating generator loss through the same fake-pair path."""
    _check_batch(x0, class_ids)
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=rng)
    _, x_t = _real_pair(x0, t, schedule, rng)
    _, x_prev_fake = _fake_prev(x_t, t, class_ids, generator, schedule, rng)
    logit_fake = discriminator(x_prev_fake, x_t, t, class_ids)
    return F.softplus(-logit_fake).mean()


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr_g: float = 1e-4
    lr_d: float = 1.6e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    r1_gamma: float = 0.05
    z_dim: int = 32
    emb_dim: int = 64
    hidden: int = 256
    depth: int = 3
    standardize: bool = True
    fd_every: int = 0         # epochs between FD snapshots; 0 disables
    fd_samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise DomainError("learning rates must be positive")
        if self.batch_size < 2:
            raise DomainError("batch_size must be >= 2")


@dataclass
class LatentScaler:
    """Per-dimension standardization of the diffusion data space."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, x: torch.Tensor) -> "LatentScaler":
        std = x.std(dim=0, unbiased=False).clamp_min(1e-6)
        return cls(x.mean(dim=0), std)

    @classmethod
    def identity(cls, dim: int) -> "LatentScaler":
        return cls(torch.zeros(dim), torch.ones(dim))

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def inverse(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.std + self.mean


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    scaler: LatentScaler
    log: list[dict] = field(default_factory=list)
    epoch: int = 0
    step: int = 0
    resume_payload: dict | None = None   # full state (incl. optimizers, rng)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from base to exactly 0 at the final step."""
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total - 1) / (total - 1)))


def train(latents, class_ids, n_classes: int, schedule: DiffusionSchedule,
          config: TrainConfig, resume: dict | None = None,
          stop_epoch: int | None = None,
          real_reference: torch.Tensor | None = None) -> TrainResult:
    """Alternating D/G steps with cosine-decayed Adam; deterministic under seed.

    The cosine horizon is always config.epochs; `stop_epoch` interrupts a
    run early and `resume` continues it from a checkpoint payload, bitwise
    identical to the uninterrupted run.  On divergence raises
    TrainingDivergedError carrying the last finite end-of-epoch state.
    """
    x_all = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
    c_all = torch.as_tensor(np.asarray(class_ids), dtype=torch.long)
    if x_all.dim() != 2 or x_all.shape[0] < 2:
        raise DomainError("latents must be an [n >= 2, d] array")
    if c_all.shape != (x_all.shape[0],):
        raise DomainError("class_ids must align with latents")
    if c_all.numel() and (int(c_all.min()) < 0 or int(c_all.max()) >= n_classes):
        raise DomainError(f"class ids must lie in [0, {n_classes})")
    latent_dim = x_all.shape[1]

    torch.manual_seed(config.seed)
    generator = Generator(latent_dim, n_classes, config.z_dim, config.emb_dim,
                          config.hidden, config.depth)
    discriminator = Discriminator(latent_dim, n_classes, config.emb_dim,
                                  config.hidden, config.depth)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr_g,
                             betas=(config.adam_beta1, config.adam_beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr_d,
                             betas=(config.adam_beta1, config.adam_beta2))
    rng = torch.Generator().manual_seed(config.seed + 1)
    data_rng = torch.Generator().manual_seed(config.seed + 2)

    if config.standardize:
        scaler = LatentScaler.fit(x_all)
    else:
        scaler = LatentScaler.identity(latent_dim)
    start_epoch = 0
    step = 0
    log: list[dict] = []
    if resume is not None:
        generator.load_state_dict(resume["g_state"])
        discriminator.load_state_dict(resume["d_state"])
        opt_g.load_state_dict(resume["opt_g"])
        opt_d.load_state_dict(resume["opt_d"])
        rng.set_state(resume["rng_state"])
        data_rng.set_state(resume["data_rng_state"])
        scaler = LatentScaler(torch.as_tensor(resume["scaler_mean"]),
                              torch.as_tensor(resume["scaler_std"]))
        start_epoch = int(resume["epoch"])
        step = int(resume["step"])

    x_std = scaler.transform(x_all)
    n = x_std.shape[0]
    batches_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.epochs * batches_per_epoch
    result = TrainResult(generator, discriminator, scaler, log, start_epoch, step)
    last_good: dict | None = None

    for epoch in range(start_epoch, stop_epoch if stop_epoch is not None else config.epochs):
        order = torch.randperm(n, generator=data_rng)
        d_sum = g_sum = 0.0
        n_batches = 0
        lr_g_now = lr_d_now = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.numel() < 2:
                continue
            x0, cls = x_std[idx], c_all[idx]
            lr_g_now = cosine_lr(config.lr_g, step, total_steps)
            lr_d_now = cosine_lr(config.lr_d, step, total_steps)
            for group in opt_d.param_groups:
                group["lr"] = lr_d_now
            for group in opt_g.param_groups:
                group["lr"] = lr_g_now

            loss_d, _ = d_loss(x0, cls, generator, discriminator, schedule, rng,
                               config.r1_gamma)
            if not torch.isfinite(loss_d):
                raise TrainingDivergedError("non-finite discriminator loss", epoch,
                                            n_batches, last_good)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            loss_g = g_loss(x0, cls, generator, discriminator, schedule, rng)
            if not torch.isfinite(loss_g):
                raise TrainingDivergedError("non-finite generator loss", epoch,
                                            n_batches, last_good)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            d_sum += loss_d.item()
            g_sum += loss_g.item()
            n_batches += 1
            step += 1

        entry = {"epoch": epoch, "d_loss": d_sum / n_batches, "g_loss": g_sum / n_batches,
                 "lr_g": lr_g_now, "lr_d": lr_d_now}
        if config.fd_every > 0 and (epoch + 1) % config.fd_every == 0:
            entry["fd"] = _fd_snapshot(result, schedule, config, x_all, real_reference,
                                       n_classes, epoch)
        log.append(entry)
        result.epoch = epoch + 1
        result.step = step
        last_good = ddgan_payload(result, schedule, task="", n_classes=n_classes,
                                  config=config, opt_g=opt_g, opt_d=opt_d,
                                  rng=rng, data_rng=data_rng)
        result.resume_payload = last_good
    return result


def _fd_snapshot(result: TrainResult, schedule: DiffusionSchedule, config: TrainConfig,
                 x_all: torch.Tensor, real_reference: torch.Tensor | None,
                 n_classes: int, epoch: int) -> float:
    from .evaluation import frechet_distance   # local import: evaluation uses this module

    real = x_all if real_reference is None else real_reference
    real = real[: max(2 * config.fd_samples, 256)]
    per_class = max(2, config.fd_samples // n_classes)
    fakes = [sample(per_class, c, result.generator, schedule, result.scaler,
                    seed=config.seed + 7919 * (epoch + 1) + c)
             for c in range(n_classes)]
    return frechet_distance(torch.cat(fakes).numpy(), real.numpy())


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------

def _sample_noise(n: int, key: int, seed: int, T: int, d: int,
                  z_dim: int, dtype: torch.dtype):
    """Per-sample noise streams so results do not depend on batching."""
    x_T = torch.empty(n, d, dtype=dtype)
    zs = torch.empty(n, T, z_dim, dtype=dtype)
    eps = torch.empty(n, T, d, dtype=dtype)
    for i in range(n):
        root = int(np.random.SeedSequence((seed, key, i)).generate_state(1)[0])
        g = torch.Generator().manual_seed(root)
        x_T[i] = torch.randn(d, generator=g, dtype=dtype)
        zs[i] = torch.randn(T, z_dim, generator=g, dtype=dtype)
        eps[i] = torch.randn(T, d, generator=g, dtype=dtype)
    return x_T, zs, eps


def sample(n: int, class_id: int, generator: Generator, schedule: DiffusionSchedule,
           scaler: LatentScaler, seed: int = 0, keep_trajectory: bool = False,
           noise_key: int | None = None):
    """Draw n conditional latents with exactly T generator evaluations.

    Returns [n, d] latents in the original (de-standardized) space; with
    keep_trajectory also the running x0' prediction per step, ordered
    t = T .. 1.  noise_key overrides the class-derived noise stream so two
    classes can be sampled with identical noise for paired comparisons.
    """
    if not 0 <= class_id < generator.n_classes:
        raise DomainError(f"class id {class_id} outside [0, {generator.n_classes})")
    T, d = schedule.T, generator.latent_dim
    key = class_id if noise_key is None else noise_key
    x, zs, eps = _sample_noise(n, key, seed, T, d, generator.z_dim,
                               next(generator.parameters()).dtype)
    class_ids = torch.full((n,), class_id, dtype=torch.long)
    trajectory: list[tuple[int, torch.Tensor]] = []
    with torch.no_grad():
        for k, t in enumerate(range(T, 0, -1)):
            x0_pred = generator(x, t, zs[:, k], class_ids)
            mean, var = posterior_params(x0_pred, x, t, schedule)
            x = mean + math.sqrt(float(var)) * eps[:, k]
            if keep_trajectory:
                trajectory.append((t, scaler.inverse(x0_pred)))
    out = scaler.inverse(x)
    if keep_trajectory:
        return out, trajectory
    return out


# ----------------------------------------------------------------------
# Checkpoint payload
# ----------------------------------------------------------------------

def ddgan_payload(result: TrainResult, schedule: DiffusionSchedule, task: str,
                  n_classes: int, config: TrainConfig,
                  opt_g=None, opt_d=None, rng=None, data_rng=None) -> dict:
    payload = {
        "latent_dim": result.generator.latent_dim,
        "n_classes": n_classes,
        "task": task,
        "schedule_betas": [float(b) for b in schedule.betas],
        "config": asdict(config),
        "g_state": copy.deepcopy(result.generator.state_dict()),
        "d_state": copy.deepcopy(result.discriminator.state_dict()),
        "scaler_mean": result.scaler.mean.clone(),
        "scaler_std": result.scaler.std.clone(),
        "epoch": result.epoch,
        "step": result.step,
    }
    if opt_g is not None:
        payload["opt_g"] = copy.deepcopy(opt_g.state_dict())
        payload["opt_d"] = copy.deepcopy(opt_d.state_dict())
        payload["rng_state"] = rng.get_state()
        payload["data_rng_state"] = data_rng.get_state()
    return payload


def ddgan_from_payload(payload: dict) -> tuple[TrainResult, DiffusionSchedule]:
    config = TrainConfig(**payload["config"])
    schedule = DiffusionSchedule(np.array(payload["schedule_betas"]))
    generator = Generator(payload["latent_dim"], payload["n_classes"], config.z_dim,
                          config.emb_dim, config.hidden, config.depth)
    discriminator = Discriminator(payload["latent_dim"], payload["n_classes"],
                                  config.emb_dim, config.hidden, config.depth)
    generator.load_state_dict(payload["g_state"])
    discriminator.load_state_dict(payload["d_state"])
    generator.eval()
    discriminator.eval()
    scaler = LatentScaler(torch.as_tensor(payload["scaler_mean"]),
                          torch.as_tensor(payload["scaler_std"]))
    result = TrainResult(generator, discriminator, scaler, [],
                         int(payload["epoch"]), int(payload["step"]))
    return result, schedule
