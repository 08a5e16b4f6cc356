"""Experiment configuration: flat key=value files with strict parsing.

Unknown keys are rejected so a typo fails fast instead of silently using a
default.  The config hash covers the structural fields only (architecture,
schedule, tokenization) so checkpoints trained with different learning
schedules or paths remain interchangeable when the artifacts are.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

SEED_ENV_VAR = "EMODIFF_SEED"
TASKS = ("4q", "arousal", "valence")

STRUCTURAL_FIELDS = (
    "task", "seq_len", "grid", "latent_dim", "z_dim", "emb_dim",
    "T", "beta_min", "beta_max", "gen_hidden", "gen_depth",
    "vae_hidden", "vae_emb_dim", "clf_hidden",
)


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    task: str = "4q"
    seq_len: int = 32
    grid: int = 4
    latent_dim: int = 64
    z_dim: int = 32
    emb_dim: int = 64
    T: int = 4
    beta_min: float = 0.3
    beta_max: float = 0.9
    batch_size: int = 256
    epochs: int = 200
    lr_g: float = 1e-4
    lr_d: float = 1.6e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    r1_gamma: float = 0.05
    gen_hidden: int = 256
    gen_depth: int = 3
    fd_every: int = 0
    vae_hidden: int = 128
    vae_emb_dim: int = 64
    vae_epochs: int = 150
    vae_lr: float = 2e-3
    vae_kl_weight: float = 0.2
    vae_batch_size: int = 32
    clf_hidden: int = 128
    clf_epochs: int = 30
    clf_lr: float = 1e-3
    clf_batch_size: int = 64
    tempo_bpm: float = 120.0
    torch_threads: int = 0      # > 0 pins the thread count; 1 = strict mode
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        for name in ("lr_g", "lr_d", "vae_lr", "clf_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("seq_len", "grid", "latent_dim", "z_dim", "emb_dim", "T",
                     "epochs", "vae_epochs", "clf_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.tempo_bpm <= 0:
            raise ConfigError("tempo_bpm must be positive")
        if self.torch_threads < 0:
            raise ConfigError("torch_threads must be >= 0")


def config_hash(cfg: ExperimentConfig) -> str:
    text = "\n".join(f"{k}={getattr(cfg, k)!r}" for k in STRUCTURAL_FIELDS)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    cfg = ExperimentConfig(**values)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def config_text(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}"
             for f in dataclasses.fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"
