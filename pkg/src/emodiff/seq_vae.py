"""Sequence VAE over melody tokens: the diffusion model's continuous data space.

GRU encoder to a diagonal Gaussian, autoregressive GRU decoder over the
130-token vocabulary.  Illegal transitions (hold at step 0, hold after
rest) are masked out of the decoder logits, so decoded sequences always
satisfy the token invariants.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, TrainingDivergedError
from .midi_io import HOLD, REST, VOCAB_SIZE
from .music_data import TokenSequence


@dataclass
class VaeConfig:
    latent_dim: int = 64
    hidden: int = 128
    emb_dim: int = 64
    seq_len: int = 32
    vocab_size: int = VOCAB_SIZE
    kl_weight: float = 0.2
    kl_anneal_frac: float = 0.5
    free_bits: float = 64.0       # KL below this many bits is unpenalized
    token_dropout: float = 0.2    # decoder-input dropout; pushes content into z
    lr: float = 2e-3
    epochs: int = 150
    batch_size: int = 32
    seed: int = 0


class SequenceVae(nn.Module):
    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.emb_dim)
        self.encoder = nn.GRU(config.emb_dim, config.hidden, batch_first=True,
                              bidirectional=True)
        self.fc_mu = nn.Linear(2 * config.hidden, config.latent_dim)
        self.fc_logvar = nn.Linear(2 * config.hidden, config.latent_dim)
        self.z_to_h = nn.Linear(config.latent_dim, config.hidden)
        self.decoder = nn.GRU(config.emb_dim + config.latent_dim, config.hidden,
                              batch_first=True)
        self.fc_out = nn.Linear(config.hidden + config.latent_dim, config.vocab_size)
        self.start_emb = nn.Parameter(torch.zeros(config.emb_dim))

    def encode_params(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _, h = self.encoder(self.embedding(tokens))
        h = torch.cat([h[0], h[1]], dim=-1)
        return self.fc_mu(h), self.fc_logvar(h)

    def decode_logits(self, z: torch.Tensor, targets: torch.Tensor,
                      token_dropout: float = 0.0,
                      rng: torch.Generator | None = None) -> torch.Tensor:
        """Teacher-forced logits [B, L, V] with illegal hold positions masked.

        token_dropout replaces that fraction of previous-token embeddings
        with the start embedding, forcing the decoder to lean on z.
        """
        batch, length = targets.shape
        prev_emb = torch.cat([
            self.start_emb.expand(batch, 1, -1),
            self.embedding(targets[:, :-1]),
        ], dim=1)
        if token_dropout > 0.0:
            drop = torch.rand(batch, length, 1, generator=rng) < token_dropout
            prev_emb = torch.where(drop, self.start_emb.expand(batch, length, -1),
                                   prev_emb)
        z_steps = z.unsqueeze(1).expand(-1, length, -1)
        dec_in = torch.cat([prev_emb, z_steps], dim=-1)
        h0 = torch.tanh(self.z_to_h(z)).unsqueeze(0)
        out, _ = self.decoder(dec_in, h0)
        logits = self.fc_out(torch.cat([out, z_steps], dim=-1))
        hold_illegal = torch.ones(batch, 1, dtype=torch.bool)
        if length > 1:
            hold_illegal = torch.cat([hold_illegal, targets[:, :-1] == REST], dim=1)
        logits[:, :, HOLD] = logits[:, :, HOLD].masked_fill(hold_illegal, float("-inf"))
        return logits

    def generate(self, z: torch.Tensor, greedy: bool = True, temperature: float = 1.0,
                 rng: torch.Generator | None = None) -> torch.Tensor:
        """Autoregressive decode to token ids [B, L]; masked so outputs are valid."""
        batch = z.shape[0]
        length = self.config.seq_len
        h = torch.tanh(self.z_to_h(z)).unsqueeze(0)
        prev_emb = self.start_emb.expand(batch, -1)
        prev_tok = torch.full((batch,), REST, dtype=torch.long)
        out_tokens = torch.empty(batch, length, dtype=torch.long)
        for step in range(length):
            dec_in = torch.cat([prev_emb, z], dim=-1).unsqueeze(1)
            out, h = self.decoder(dec_in, h)
            logits = self.fc_out(torch.cat([out[:, 0], z], dim=-1))
            illegal = (prev_tok == REST) if step > 0 else torch.ones(batch, dtype=torch.bool)
            logits[:, HOLD] = logits[:, HOLD].masked_fill(illegal, float("-inf"))
            if greedy:
                tok = logits.argmax(dim=-1)
            else:
                probs = F.softmax(logits / temperature, dim=-1)
                tok = torch.multinomial(probs, 1, generator=rng).squeeze(-1)
            out_tokens[:, step] = tok
            prev_emb = self.embedding(tok)
            prev_tok = tok
        return out_tokens


def tokens_tensor(seqs) -> torch.Tensor:
    """Accept TokenSequence(s) or an int array and return int64 [B, L]."""
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    if isinstance(seqs, (list, tuple)) and seqs and isinstance(seqs[0], TokenSequence):
        return torch.tensor([s.tokens for s in seqs], dtype=torch.long)
    arr = torch.as_tensor(np.asarray(seqs), dtype=torch.long)
    if arr.dim() == 1:
        arr = arr.unsqueeze(0)
    return arr


def encode(model: SequenceVae, seqs, deterministic: bool = True,
           rng: torch.Generator | None = None) -> torch.Tensor:
    """Sequences -> latents [B, latent_dim]; deterministic mode returns the mean."""
    tokens = tokens_tensor(seqs)
    if tokens.shape[1] != model.config.seq_len:
        raise DomainError(f"sequence length {tokens.shape[1]} != configured "
                          f"{model.config.seq_len}")
    with torch.no_grad():
        mu, logvar = model.encode_params(tokens)
        if deterministic:
            return mu
        eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
        return mu + torch.exp(0.5 * logvar) * eps


def decode(model: SequenceVae, z: torch.Tensor, greedy: bool = True,
           temperature: float = 1.0, rng: torch.Generator | None = None) -> list[TokenSequence]:
    z = torch.as_tensor(z, dtype=torch.float32)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.shape[-1] != model.config.latent_dim:
        raise DomainError(f"latent dim {z.shape[-1]} != configured {model.config.latent_dim}")
    if not torch.isfinite(z).all():
        raise DomainError("latent vector contains non-finite entries")
    with torch.no_grad():
        tokens = model.generate(z, greedy=greedy, temperature=temperature, rng=rng)
    return [TokenSequence(tuple(int(t) for t in row)) for row in tokens]


def elbo_terms(model: SequenceVae, tokens: torch.Tensor, rng: torch.Generator,
               token_dropout: float = 0.0
               ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-example sums: reconstruction CE over steps, analytic KL over dims.

    Both terms are summed within an example and averaged over the batch so
    kl_weight trades them off at a scale independent of batch size.
    """
    mu, logvar = model.encode_params(tokens)
    eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * eps
    logits = model.decode_logits(z, tokens, token_dropout, rng)
    ce = F.cross_entropy(logits.reshape(-1, model.config.vocab_size),
                         tokens.reshape(-1), reduction="none")
    recon = ce.reshape(tokens.shape).sum(dim=1).mean()
    kl = (-0.5 * (1.0 + logvar - mu.pow(2) - logvar.exp()).sum(dim=1)).mean()
    acc = (logits.argmax(dim=-1) == tokens).float().mean()
    return recon, kl, acc


def kl_penalty(kl: torch.Tensor, free_bits: float) -> torch.Tensor:
    """Free-bits floor: only the KL mass above the floor is penalized."""
    return torch.clamp(kl - free_bits * math.log(2.0), min=0.0)


def train_vae(tokens, config: VaeConfig, init_state: dict | None = None,
              start_epoch: int = 0) -> tuple[SequenceVae, list[dict]]:
    """Optimize the ELBO with a linear KL warm-up; deterministic under seed.

    `init_state`/`start_epoch` resume a previous run's weights and epoch
    counter (the optimizer restarts fresh); training ends at config.epochs.
    """
    data = tokens_tensor(tokens)
    if data.shape[0] == 0:
        raise DomainError("empty training corpus")
    if data.shape[1] != config.seq_len:
        raise DomainError(f"corpus length {data.shape[1]} != configured {config.seq_len}")
    torch.manual_seed(config.seed)
    model = SequenceVae(config)
    if init_state is not None:
        model.load_state_dict(init_state)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = torch.Generator().manual_seed(config.seed + start_epoch)
    n = data.shape[0]
    anneal_epochs = max(1, math.ceil(config.epochs * config.kl_anneal_frac))
    log = []
    for epoch in range(start_epoch, config.epochs):
        order = torch.randperm(n, generator=rng)
        weight = config.kl_weight * min(1.0, epoch / anneal_epochs)
        sums = {"recon": 0.0, "kl": 0.0, "acc": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            recon, kl, acc = elbo_terms(model, batch, rng, config.token_dropout)
            if config.kl_weight > 0:
                loss = recon + weight * kl_penalty(kl, config.free_bits)
            else:
                loss = recon
            if not torch.isfinite(loss):
                raise TrainingDivergedError("non-finite VAE loss", epoch, n_batches)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["recon"] += recon.item()
            sums["kl"] += kl.item()
            sums["acc"] += acc.item()
            n_batches += 1
        log.append({
            "epoch": epoch,
            "recon": sums["recon"] / n_batches,
            "kl": sums["kl"] / n_batches,
            "kl_weight": weight,
            "token_acc": sums["acc"] / n_batches,
        })
    return model, log


def reconstruction_accuracy(model: SequenceVae, seqs) -> float:
    """Fraction of tokens reproduced by greedy decode of the encoder mean."""
    tokens = tokens_tensor(seqs)
    z = encode(model, tokens, deterministic=True)
    with torch.no_grad():
        out = model.generate(z, greedy=True)
    return (out == tokens).float().mean().item()


def vae_payload(model: SequenceVae) -> dict:
    return {"config": asdict(model.config),
            "state": {k: v for k, v in model.state_dict().items()}}


def vae_from_payload(payload: dict) -> SequenceVae:
    model = SequenceVae(VaeConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
