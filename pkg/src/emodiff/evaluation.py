"""Sample-quality metrics and emotion-control scoring.

Fréchet distance and MMD operate on latent embedding sets; control
accuracy decodes conditional samples and scores them with an
independently trained classifier (bi-LSTM + self-attention pooling).
"""
from __future__ import annotations

import io
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ddgan, seq_vae
from .diffusion_core import DiffusionSchedule
from .errors import ConfigError, DomainError, TaskMismatchError, TrainingDivergedError
from .midi_io import VOCAB_SIZE
from .music_data import TASK_CLASS_NAMES, Task

# Control accuracies reported for the full EMOPIA-scale setup (regression
# reference only; not reproducible at desk scale).
EMOPIA_REFERENCE_ACCURACY = {"4q": 0.691, "arousal": 0.906, "valence": 0.656}
EMOPIA_BASELINE_ACCURACY = {"4q": 0.418, "arousal": 0.690, "valence": 0.583}

EIGENVALUE_FLOOR = -1e-6


# ----------------------------------------------------------------------
# Fréchet distance
# ----------------------------------------------------------------------

def _mean_cov(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError(f"need an [n >= 2, d] set, got shape {x.shape}")
    if x.shape[0] < x.shape[1] + 1:
        warnings.warn(f"only {x.shape[0]} samples for {x.shape[1]} dims; "
                      "covariance estimate will be rank-deficient", stacklevel=3)
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2.0
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"covariance square root failed: {exc}") from exc
    if w.min() < EIGENVALUE_FLOOR:
        raise DomainError(f"covariance eigenvalue {w.min():.3g} below {EIGENVALUE_FLOOR}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a, b) -> float:
    """||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2)) between Gaussian fits."""
    mu_a, cov_a = _mean_cov(a)
    mu_b, cov_b = _mean_cov(b)
    if mu_a.shape != mu_b.shape:
        raise DomainError(f"dimension mismatch {mu_a.shape} vs {mu_b.shape}")
    sqrt_a = _sqrtm_psd(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if w.min() < EIGENVALUE_FLOOR:
        raise DomainError(f"product eigenvalue {w.min():.3g} below {EIGENVALUE_FLOOR}")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


# ----------------------------------------------------------------------
# Maximum Mean Discrepancy (unbiased, RBF kernel)
# ----------------------------------------------------------------------

def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x ** 2).sum(axis=1, keepdims=True)
    yy = (y ** 2).sum(axis=1, keepdims=True)
    return np.maximum(xx + yy.T - 2.0 * x @ y.T, 0.0)


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance (off-diagonal); falls back to 1."""
    d2 = _sq_dists(pooled, pooled)
    off = np.sqrt(d2[np.triu_indices_from(d2, k=1)])
    med = float(np.median(off)) if off.size else 0.0
    return med if med > 0.0 else 1.0


def _mmd2_from_kernel(k: np.ndarray, nx: int) -> float:
    kxx = k[:nx, :nx]
    kyy = k[nx:, nx:]
    kxy = k[:nx, nx:]
    ny = kyy.shape[0]
    sx = (kxx.sum() - np.trace(kxx)) / (nx * (nx - 1))
    sy = (kyy.sum() - np.trace(kyy)) / (ny * (ny - 1))
    return float(sx + sy - 2.0 * kxy.mean())


def mmd2(a, b, bandwidth: float | str = "median") -> float:
    """Unbiased U-statistic estimate of squared MMD; can be slightly negative."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DomainError(f"need [n, d] sets with matching d, got {a.shape} and {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DomainError("unbiased MMD needs at least 2 samples per set")
    pooled = np.concatenate([a, b], axis=0)
    if bandwidth == "median":
        bandwidth = median_bandwidth(pooled)
    if not bandwidth > 0:
        raise DomainError(f"bandwidth must be positive, got {bandwidth}")
    k = np.exp(-_sq_dists(pooled, pooled) / (2.0 * bandwidth ** 2))
    return _mmd2_from_kernel(k, a.shape[0])


def mmd_permutation_test(a, b, n_permutations: int = 200, alpha: float = 0.05,
                         seed: int = 0, bandwidth: float | str = "median"
                         ) -> tuple[float, float]:
    """Observed MMD^2 and the (1-alpha) permutation-null threshold.

    The kernel matrix is computed once on the pooled sample (the median
    bandwidth is permutation invariant) and re-blocked per permutation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b], axis=0)
    if bandwidth == "median":
        bandwidth = median_bandwidth(pooled)
    k = np.exp(-_sq_dists(pooled, pooled) / (2.0 * bandwidth ** 2))
    nx = a.shape[0]
    observed = _mmd2_from_kernel(k, nx)
    rng = np.random.default_rng(seed)
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        perm = rng.permutation(pooled.shape[0])
        null[i] = _mmd2_from_kernel(k[np.ix_(perm, perm)], nx)
    return observed, float(np.quantile(null, 1.0 - alpha))


# ----------------------------------------------------------------------
# Emotion classifier
# ----------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    n_classes: int = 4
    hidden: int = 128
    emb_dim: int = 64
    attn_dim: int = 64
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    heldout_frac: float = 0.1
    seed: int = 0


class EmotionClassifier(nn.Module):
    """Bi-directional LSTM encoder with additive self-attention pooling."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(VOCAB_SIZE, config.emb_dim)
        self.lstm = nn.LSTM(config.emb_dim, config.hidden, batch_first=True,
                            bidirectional=True)
        self.attn_w = nn.Linear(2 * config.hidden, config.attn_dim)
        self.attn_v = nn.Linear(config.attn_dim, 1, bias=False)
        self.head = nn.Linear(2 * config.hidden, config.n_classes)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        out, _ = self.lstm(self.embedding(tokens))
        scores = self.attn_v(torch.tanh(self.attn_w(out)))
        weights = F.softmax(scores, dim=1)
        context = (weights * out).sum(dim=1)
        return self.head(context)


def _stratified_split(class_ids: np.ndarray, frac: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train_idx, held_idx = [], []
    for c in np.unique(class_ids):
        idx = np.flatnonzero(class_ids == c)
        if idx.size < 2:
            raise ConfigError(f"class {c} has {idx.size} example(s); need >= 2")
        idx = rng.permutation(idx)
        n_held = max(1, round(frac * idx.size))
        held_idx.append(idx[:n_held])
        train_idx.append(idx[n_held:])
    return np.concatenate(train_idx), np.concatenate(held_idx)


def train_classifier(tokens, class_ids, config: ClassifierConfig,
                     init_state: dict | None = None, start_epoch: int = 0
                     ) -> tuple[EmotionClassifier, float, list[dict]]:
    """Cross-entropy training with a stratified 90/10 split; returns held-out accuracy."""
    data = seq_vae.tokens_tensor(tokens)
    labels = torch.as_tensor(np.asarray(class_ids), dtype=torch.long)
    present = np.unique(np.asarray(class_ids))
    if present.size < config.n_classes:
        raise ConfigError(f"corpus covers {present.size} of {config.n_classes} classes")
    rng = np.random.default_rng(config.seed)
    train_idx, held_idx = _stratified_split(np.asarray(class_ids), config.heldout_frac, rng)

    torch.manual_seed(config.seed)
    model = EmotionClassifier(config)
    if init_state is not None:
        model.load_state_dict(init_state)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    order_rng = torch.Generator().manual_seed(config.seed + start_epoch)
    log = []
    for epoch in range(start_epoch, config.epochs):
        order = torch.randperm(len(train_idx), generator=order_rng)
        total = 0.0
        n_batches = 0
        for start in range(0, len(train_idx), config.batch_size):
            idx = torch.as_tensor(train_idx)[order[start:start + config.batch_size]]
            logits = model(data[idx])
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError("non-finite classifier loss", epoch, n_batches)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        log.append({"epoch": epoch, "loss": total / n_batches})

    model.eval()
    with torch.no_grad():
        preds = model(data[held_idx]).argmax(dim=-1)
    heldout_acc = (preds == labels[held_idx]).float().mean().item()
    return model, heldout_acc, log


def classify_proba(model: EmotionClassifier, tokens) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        probs = F.softmax(model(seq_vae.tokens_tensor(tokens)), dim=-1)
    return probs.numpy()


def classifier_payload(model: EmotionClassifier) -> dict:
    return {"config": asdict(model.config),
            "state": {k: v for k, v in model.state_dict().items()}}


def classifier_from_payload(payload: dict) -> EmotionClassifier:
    model = EmotionClassifier(ClassifierConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    class_names: tuple[str, ...]
    n_per_class: int
    confusion: np.ndarray                      # rows = target condition
    per_step: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def per_class_accuracy(self) -> list[float]:
        totals = self.confusion.sum(axis=1)
        return [float(self.confusion[i, i] / totals[i]) if totals[i] else 0.0
                for i in range(len(self.class_names))]

    @property
    def overall_accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"task: {self.task}\n")
        out.write(f"samples per class: {self.n_per_class}\n")
        out.write(f"overall control accuracy: {self.overall_accuracy:.3f}\n")
        for name, acc in zip(self.class_names, self.per_class_accuracy):
            out.write(f"  {name}: {acc:.3f}\n")
        ref = EMOPIA_REFERENCE_ACCURACY.get(self.task)
        if ref is not None:
            out.write(f"reference (full EMOPIA-scale run): {ref:.3f}\n")
            out.write(f"baseline transformer (same benchmark): "
                      f"{EMOPIA_BASELINE_ACCURACY[self.task]:.3f}\n")
        out.write("confusion matrix (rows = target, cols = predicted):\n")
        header = " ".join(f"{n:>6}" for n in self.class_names)
        out.write(f"        {header}\n")
        for name, row in zip(self.class_names, self.confusion):
            cells = " ".join(f"{int(v):>6}" for v in row)
            out.write(f"  {name:>5} {cells}\n")
        if self.per_step:
            out.write("per-step distances (t, FD, MMD2):\n")
            for t, fd, mmd in self.per_step:
                out.write(f"  t={t}: FD={fd:.4f} MMD2={mmd:.6f}\n")
        return out.getvalue()

    def confusion_csv(self) -> str:
        lines = ["target," + ",".join(self.class_names)]
        for name, row in zip(self.class_names, self.confusion):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    def per_step_csv(self) -> str:
        lines = ["t,fd,mmd2"]
        for t, fd, mmd in self.per_step:
            lines.append(f"{t},{fd!r},{mmd!r}")
        return "\n".join(lines) + "\n"


def control_accuracy(gan: ddgan.TrainResult, schedule: DiffusionSchedule,
                     vae: seq_vae.SequenceVae, clf: EmotionClassifier, task: Task,
                     n_per_class: int, seed: int = 0) -> EvalReport:
    """Generate n_per_class samples per class, decode, classify, tabulate."""
    names = TASK_CLASS_NAMES[task]
    n_classes = len(names)
    if gan.generator.n_classes != n_classes:
        raise TaskMismatchError(f"generator has {gan.generator.n_classes} classes, "
                                f"task {task.value} needs {n_classes}")
    if clf.config.n_classes != n_classes:
        raise TaskMismatchError(f"classifier has {clf.config.n_classes} classes, "
                                f"task {task.value} needs {n_classes}")
    if n_per_class < 1:
        raise DomainError("n_per_class must be >= 1")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for c in range(n_classes):
        latents = ddgan.sample(n_per_class, c, gan.generator, schedule, gan.scaler,
                               seed=seed)
        seqs = seq_vae.decode(vae, latents, greedy=True)
        preds = classify_proba(clf, seqs).argmax(axis=1)
        confusion[c] = np.bincount(preds, minlength=n_classes)
    return EvalReport(task.value, names, n_per_class, confusion)


def per_step_curve(gan: ddgan.TrainResult, schedule: DiffusionSchedule,
                   real_latents: np.ndarray, n: int, seed: int = 0
                   ) -> list[tuple[int, float, float]]:
    """FD/MMD between the running x0' estimates and the real set, t = T .. 1."""
    n_classes = gan.generator.n_classes
    per_class = max(2, n // n_classes)
    step_sets: dict[int, list[torch.Tensor]] = {t: [] for t in range(1, schedule.T + 1)}
    for c in range(n_classes):
        _, trajectory = ddgan.sample(per_class, c, gan.generator, schedule, gan.scaler,
                                     seed=seed, keep_trajectory=True)
        for t, x0_pred in trajectory:
            step_sets[t].append(x0_pred)
    real = np.asarray(real_latents, dtype=np.float64)
    curve = []
    for t in range(schedule.T, 0, -1):
        gen = torch.cat(step_sets[t]).numpy()
        curve.append((t, frechet_distance(gen, real), mmd2(gen, real)))
    return curve


def project_2d(sets: list[np.ndarray]) -> list[np.ndarray]:
    """Shared PCA basis fit on the union; per-set 2-D coordinates."""
    arrays = [np.asarray(s, dtype=np.float64) for s in sets]
    if not arrays:
        raise DomainError("no sets to project")
    union = np.concatenate(arrays, axis=0)
    if union.shape[0] < 3:
        raise DomainError(f"need a combined n >= 3, got {union.shape[0]}")
    center = union.mean(axis=0)
    centered = union - center
    if not centered.any():
        raise DomainError("zero-variance data cannot be projected")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2]
    if basis.shape[0] < 2:
        basis = np.concatenate([basis, np.zeros((2 - basis.shape[0], basis.shape[1]))])
    return [(a - center) @ basis.T for a in arrays]


def projection_csv(sets: list[np.ndarray], labels: list[str]) -> str:
    """2-D point list (label,x,y) on a shared basis, for external plotting."""
    if len(sets) != len(labels):
        raise DomainError("one label per set required")
    lines = ["label,x,y"]
    for label, points in zip(labels, project_2d(sets)):
        for x, y in points:
            lines.append(f"{label},{x!r},{y!r}")
    return "\n".join(lines) + "\n"
