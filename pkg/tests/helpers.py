"""Shared test utilities: finite-difference gradient checking and toy data."""
from __future__ import annotations

import math

import numpy as np
import torch

from emodiff.ddgan import Discriminator, Generator


def tiny_nets(latent_dim: int = 4, n_classes: int = 2, width: int = 8,
              seed: int = 0) -> tuple[Generator, Discriminator]:
    """Width-8 double-precision networks for gradient checks."""
    torch.manual_seed(seed)
    g = Generator(latent_dim, n_classes, z_dim=3, emb_dim=6, hidden=width, depth=2)
    d = Discriminator(latent_dim, n_classes, emb_dim=6, hidden=width, depth=2)
    return g.double(), d.double()


def max_relative_gradient_error(loss_fn, params: list[torch.Tensor],
                                n_coords: int = 12, h: float = 1e-4,
                                seed: int = 0, floor: float = 1e-6) -> float:
    """Compare autograd gradients against central finite differences.

    loss_fn must be a deterministic function of `params` (reseed any rng
    inside it).  Checks n_coords randomly chosen scalar coordinates per
    tensor; relative error uses max(|analytic|, |numeric|, floor) as the
    denominator so near-zero gradients do not inflate the ratio.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        flat = param.reshape(-1)
        n = min(n_coords, flat.numel())
        for idx in rng.choice(flat.numel(), size=n, replace=False):
            idx = int(idx)
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + h
            up = loss_fn().item()
            with torch.no_grad():
                flat[idx] = original - h
            down = loss_fn().item()
            with torch.no_grad():
                flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            analytic = grad.reshape(-1)[idx].item()
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def eight_gaussians(n: int, seed: int, radius: float = 2.0,
                    std: float = 0.2) -> tuple[np.ndarray, np.ndarray, float]:
    """2-D mixture of 8 equal Gaussians on a circle; returns (data, centers, std)."""
    rng = np.random.default_rng(seed)
    centers = np.stack([
        [radius * math.cos(2 * math.pi * k / 8), radius * math.sin(2 * math.pi * k / 8)]
        for k in range(8)
    ])
    idx = rng.integers(0, 8, n)
    data = centers[idx] + rng.normal(0.0, std, (n, 2))
    return data, centers, std


def mode_hits(samples: np.ndarray, centers: np.ndarray, std: float,
              min_fraction: float = 0.02) -> tuple[int, np.ndarray]:
    """Modes holding at least min_fraction of samples within 3 std of the center."""
    d = np.linalg.norm(samples[:, None, :] - centers[None], axis=2)
    nearest = d.argmin(axis=1)
    within = d[np.arange(len(samples)), nearest] <= 3.0 * std
    counts = np.bincount(nearest[within], minlength=len(centers))
    return int((counts >= min_fraction * len(samples)).sum()), counts
