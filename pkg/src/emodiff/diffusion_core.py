"""Variance schedule, forward noising, and the Gaussian denoising posterior.

Steps are 1-indexed: x_0 is clean data, x_T is (approximately) pure noise.
All derived arrays are float64 and recomputable from the betas alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DomainError

MAX_STEPS = 8
MAX_TERMINAL_ALPHA_BAR = 0.02

DEFAULT_T = 4
DEFAULT_BETA_MIN = 0.3
DEFAULT_BETA_MAX = 0.9


@dataclass(frozen=True)
class DiffusionSchedule:
    """T noise levels with the derived alpha products (alpha_bar_0 = 1)."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)      # [T+1], index t holds alpha_bar_t
    posterior_vars: np.ndarray = field(init=False)  # [T], index t-1 holds beta_tilde_t

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("betas must be a non-empty 1-D array")
        if betas.size > MAX_STEPS:
            raise ConfigError(f"T={betas.size} exceeds the large-step regime bound T<={MAX_STEPS}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        if alpha_bars[-1] > MAX_TERMINAL_ALPHA_BAR:
            raise ConfigError(
                f"alpha_bar_T={alpha_bars[-1]:.4g} exceeds {MAX_TERMINAL_ALPHA_BAR}; "
                "terminal state would not be close to pure noise (raise beta_max or T)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        post = betas * (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])
        object.__setattr__(self, "posterior_vars", post)

    @property
    def T(self) -> int:
        return int(self.betas.size)


def make_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX) -> DiffusionSchedule:
    """Linearly spaced betas from beta_min to beta_max over T steps."""
    if not 1 <= T <= MAX_STEPS:
        raise ConfigError(f"T must be in [1, {MAX_STEPS}], got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    return DiffusionSchedule(np.linspace(beta_min, beta_max, T))


def _coef(values: np.ndarray, index, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule entries for an int step or a per-sample step tensor."""
    table = torch.as_tensor(values, dtype=like.dtype)
    if isinstance(index, torch.Tensor):
        if index.dim() != 1 or index.shape[0] != like.shape[0]:
            raise DomainError(f"step tensor shape {tuple(index.shape)} does not match batch "
                              f"{like.shape[0]}")
        return table[index].unsqueeze(-1)
    return table[int(index)]


def _check_step(t, T: int, low: int) -> None:
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < low or hi > T:
        raise DomainError(f"step {lo if lo < low else hi} outside [{low}, {T}]")


def forward_step(x_prev: torch.Tensor, t, schedule: DiffusionSchedule,
                 rng: torch.Generator) -> torch.Tensor:
    """One forward transition: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps."""
    _check_step(t, schedule.T, 1)
    beta = _coef(schedule.betas, t - 1, x_prev)
    eps = torch.randn(x_prev.shape, generator=rng, dtype=x_prev.dtype)
    return torch.sqrt(1.0 - beta) * x_prev + torch.sqrt(beta) * eps


def marginal(x0: torch.Tensor, t, schedule: DiffusionSchedule,
             rng: torch.Generator) -> torch.Tensor:
    """Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    t = 0 is the degenerate case (alpha_bar_0 = 1) and returns x0 unchanged.
    """
    _check_step(t, schedule.T, 0)
    abar = _coef(schedule.alpha_bars, t, x0)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def forward_trajectory(x0: torch.Tensor, schedule: DiffusionSchedule,
                       rng: torch.Generator) -> list[torch.Tensor]:
    """Compose forward_step T times; returns [x_1, ..., x_T]."""
    xs = []
    x = x0
    for t in range(1, schedule.T + 1):
        x = forward_step(x, t, schedule, rng)
        xs.append(x)
    return xs


def posterior_params(x0: torch.Tensor, xt: torch.Tensor, t,
                     schedule: DiffusionSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of q(x_{t-1} | x_t, x_0).

    mean = sqrt(abar_{t-1}) beta_t / (1-abar_t) * x0
         + sqrt(alpha_t) (1-abar_{t-1}) / (1-abar_t) * xt
    var  = beta_t (1-abar_{t-1}) / (1-abar_t)

    At t=1 the formula degenerates to (x0, 0): the final denoising step
    emits the prediction directly.  The variance never carries gradients
    (it depends only on the schedule).
    """
    _check_step(t, schedule.T, 1)
    if x0.shape != xt.shape:
        raise DomainError(f"x0 shape {tuple(x0.shape)} != xt shape {tuple(xt.shape)}")
    t_idx = t - 1
    beta = _coef(schedule.betas, t_idx, x0)
    alpha = _coef(schedule.alphas, t_idx, x0)
    abar_prev = _coef(schedule.alpha_bars[:-1], t_idx, x0)   # alpha_bar_{t-1}
    abar = _coef(schedule.alpha_bars[1:], t_idx, x0)         # alpha_bar_t
    coef_x0 = torch.sqrt(abar_prev) * beta / (1.0 - abar)
    coef_xt = torch.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    var = _coef(schedule.posterior_vars, t_idx, x0)
    return coef_x0 * x0 + coef_xt * xt, var
