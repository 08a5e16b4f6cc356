"""Monophonic melody tokenization, emotion labels, and the synthetic corpus.

Token vocabulary (130 ids):

    0-127   note-on at that MIDI pitch
    128     hold the previous note
    129     rest

A hold may never start a sequence or follow a rest.  Sequences are fixed
length (default 32 steps = two 4/4 bars at a 16th-note grid).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, EmptyClipError
from .midi_io import HOLD, REST, VOCAB_SIZE, Note, notes_to_midi, tokens_to_notes

DEFAULT_SEQ_LEN = 32
DEFAULT_GRID = 4

MAJOR_PCS = (0, 2, 4, 5, 7, 9, 11)          # C major
HARMONIC_MINOR_PCS = (0, 2, 3, 5, 7, 8, 11)  # C harmonic minor
MINOR_MARKER_PCS = frozenset({3, 8})         # pitch classes absent from C major

HIGH_AROUSAL_MIN_ONSETS = 12   # per 32 steps
LOW_AROUSAL_MAX_ONSETS = 6


class Quadrant(Enum):
    """Russell-circumplex quadrant, bijective with EMOPIA's Q1..Q4."""

    HVHA = 0
    LVHA = 1
    LVLA = 2
    HVLA = 3

    @property
    def q_token(self) -> str:
        return f"Q{self.value + 1}"

    @classmethod
    def from_q_token(cls, token: str) -> "Quadrant":
        token = token.strip().upper()
        for member in cls:
            if member.q_token == token:
                return member
        raise DomainError(f"unknown quadrant token {token!r} (expected Q1..Q4)")

    @property
    def high_arousal(self) -> bool:
        return self in (Quadrant.HVHA, Quadrant.LVHA)

    @property
    def high_valence(self) -> bool:
        return self in (Quadrant.HVHA, Quadrant.HVLA)


class Task(Enum):
    FOUR_Q = "4q"
    AROUSAL = "arousal"
    VALENCE = "valence"


TASK_CLASS_NAMES: dict[Task, tuple[str, ...]] = {
    Task.FOUR_Q: ("HVHA", "LVHA", "LVLA", "HVLA"),
    Task.AROUSAL: ("HA", "LA"),
    Task.VALENCE: ("HV", "LV"),
}


@dataclass(frozen=True)
class TaskLabel:
    task: Task
    class_id: int

    def __post_init__(self):
        n = len(TASK_CLASS_NAMES[self.task])
        if not 0 <= self.class_id < n:
            raise DomainError(f"class_id {self.class_id} outside [0, {n}) for task {self.task.value}")

    @property
    def class_name(self) -> str:
        return TASK_CLASS_NAMES[self.task][self.class_id]


def remap_labels(label: Quadrant, task: Task) -> TaskLabel:
    """Map a quadrant onto a task's class set (identity for the 4-class task)."""
    if task is Task.FOUR_Q:
        return TaskLabel(task, label.value)
    if task is Task.AROUSAL:
        return TaskLabel(task, 0 if label.high_arousal else 1)
    return TaskLabel(task, 0 if label.high_valence else 1)


def n_classes_for_task(task: Task) -> int:
    return len(TASK_CLASS_NAMES[task])


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-grid melody as vocabulary token ids; invariants checked on build."""

    tokens: tuple[int, ...]
    grid: int = DEFAULT_GRID

    def __post_init__(self):
        if not self.tokens:
            raise DomainError("empty token sequence")
        prev = None
        for i, tok in enumerate(self.tokens):
            if not 0 <= tok < VOCAB_SIZE:
                raise DomainError(f"token {tok} at step {i} outside [0, {VOCAB_SIZE - 1}]")
            if tok == HOLD and (i == 0 or prev == REST):
                where = "at step 0" if i == 0 else f"after rest at step {i}"
                raise DomainError(f"hold token {where}")
            prev = tok

    def __len__(self) -> int:
        return len(self.tokens)

    def note_on_count(self) -> int:
        return sum(1 for t in self.tokens if t < HOLD)

    def pitch_classes(self) -> set[int]:
        return {t % 12 for t in self.tokens if t < HOLD}


@dataclass(frozen=True)
class LabeledClip:
    sequence: TokenSequence
    label: Quadrant
    source_id: str


def extract_monophonic(notes: list[Note], length: int = DEFAULT_SEQ_LEN,
                       grid: int = DEFAULT_GRID) -> TokenSequence:
    """Skyline reduction: keep the highest sounding pitch at each grid step.

    A note-on is emitted when the skyline pitch changes, when the winning
    note attacks at that step, or after a rest; sustained steps become hold
    tokens and silent steps rests.  Raises EmptyClipError for an all-silent
    window.
    """
    tokens: list[int] = []
    prev_sounding = False
    prev_pitch = -1
    for step in range(length):
        sounding = [n for n in notes if n.onset <= step < n.onset + n.duration]
        if not sounding:
            tokens.append(REST)
            prev_sounding = False
            continue
        top = max(sounding, key=lambda n: (n.pitch, n.onset))
        attack = top.onset == step
        if not prev_sounding or top.pitch != prev_pitch or attack:
            tokens.append(top.pitch)
        else:
            tokens.append(HOLD)
        prev_sounding = True
        prev_pitch = top.pitch
    if all(t == REST for t in tokens):
        raise EmptyClipError(f"no sounding steps in window of length {length}")
    return TokenSequence(tuple(tokens), grid=grid)


def slice_windows(notes: list[Note], length: int = DEFAULT_SEQ_LEN) -> list[list[Note]]:
    """Cut a note list into non-overlapping windows of `length` steps.

    Clips shorter than one window yield nothing; notes crossing a window
    boundary are truncated at it (a left-crossing note re-attacks at the
    window start).  All-silent windows are dropped.
    """
    if not notes:
        return []
    span = max(n.onset + n.duration for n in notes)
    windows = []
    for w in range(span // length):
        lo, hi = w * length, (w + 1) * length
        clipped = []
        for n in notes:
            start = max(n.onset, lo)
            end = min(n.onset + n.duration, hi)
            if end > start:
                clipped.append(Note(n.pitch, start - lo, end - start))
        if clipped:
            windows.append(clipped)
    return windows


@dataclass(frozen=True)
class LabelRow:
    clip_id: str
    quadrant: Quadrant


def load_emopia_labels(index_file) -> tuple[list[LabelRow], list[tuple[int, str]]]:
    """Read a `clip_id,quadrant` CSV.

    Quadrant cells must be Q1..Q4; when the cell is missing or unknown the
    EMOPIA-style filename stem (Q1_xxx...) is tried.  Bad rows are collected
    as (row_number, message) instead of aborting.
    """
    if isinstance(index_file, (str, Path)):
        text = Path(index_file).read_text()
    else:
        text = index_file.read()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "clip_id" not in reader.fieldnames:
        raise ConfigError("label CSV must have a header with columns clip_id,quadrant")

    rows: list[LabelRow] = []
    errors: list[tuple[int, str]] = []
    for i, rec in enumerate(reader, start=2):   # header is line 1
        clip_id = (rec.get("clip_id") or "").strip()
        token = (rec.get("quadrant") or "").strip()
        try:
            rows.append(LabelRow(clip_id, Quadrant.from_q_token(token)))
            continue
        except DomainError:
            pass
        stem = clip_id.split("_", 1)[0]
        try:
            rows.append(LabelRow(clip_id, Quadrant.from_q_token(stem)))
        except DomainError:
            errors.append((i, f"row {i}: unknown quadrant {token!r} for clip {clip_id!r}"))
    return rows, errors


# ----------------------------------------------------------------------
# Synthetic corpus: labels recoverable by construction
# ----------------------------------------------------------------------

def synth_corpus(n: int, seed: int, length: int = DEFAULT_SEQ_LEN,
                 grid: int = DEFAULT_GRID) -> list[LabeledClip]:
    """Generate `n` labeled clips, balanced across the four quadrants.

    Arousal proxy is note density (HA >= 12 note-ons per 32 steps, LA <= 6,
    scaled with `length`); valence proxy is the scale (HV uses C-major
    pitches only, LV uses C-harmonic-minor and always contains at least one
    Eb/Ab marker pitch).  Deterministic given (n, seed).
    """
    if n < 1:
        raise DomainError(f"corpus size must be >= 1, got {n}")
    clips = []
    for i in range(n):
        quadrant = list(Quadrant)[i % 4]
        rng = np.random.default_rng((seed, i))
        tokens = _synth_melody(rng, quadrant, length)
        clips.append(LabeledClip(
            sequence=TokenSequence(tuple(tokens), grid=grid),
            label=quadrant,
            source_id=f"synth{seed}_{i:05d}",
        ))
    return clips


def _synth_melody(rng: np.random.Generator, quadrant: Quadrant, length: int) -> list[int]:
    """Evenly spaced onsets at the class density plus an up-or-repeat scale walk."""
    ha_min = max(1, round(HIGH_AROUSAL_MIN_ONSETS * length / DEFAULT_SEQ_LEN))
    la_max = max(1, round(LOW_AROUSAL_MAX_ONSETS * length / DEFAULT_SEQ_LEN))
    if quadrant.high_arousal:
        n_onsets = int(rng.integers(ha_min, min(ha_min + 5, length) + 1))
    else:
        n_onsets = int(rng.integers(max(1, la_max - 2), la_max + 1))

    onsets = np.unique((np.arange(n_onsets) * length) // n_onsets)

    pcs = MAJOR_PCS if quadrant.high_valence else HARMONIC_MINOR_PCS
    pool = sorted(base_pitch + pc for base_pitch in (60, 72) for pc in pcs)
    degree = int(rng.integers(0, 7))            # start in the lower octave
    pitches = []
    for _ in range(len(onsets)):
        degree += int(rng.integers(0, 2))       # repeat or step up the scale
        degree = int(np.clip(degree, 0, len(pool) - 1))
        pitches.append(pool[degree])
    if not quadrant.high_valence and not any(p % 12 in MINOR_MARKER_PCS for p in pitches):
        k = int(rng.integers(len(pitches)))
        markers = [p for p in pool if p % 12 in MINOR_MARKER_PCS]
        pitches[k] = min(markers, key=lambda p: abs(p - pitches[k]))

    tokens = [REST] * length
    for k, (onset, pitch) in enumerate(zip(onsets, pitches)):
        last = k + 1 == len(onsets)
        gap = int((onsets[k + 1] if not last else length) - onset)
        if last:
            dur = gap                            # sustain to the bar end
        elif quadrant.high_arousal:
            dur = min(gap, 2)                    # legato up to an 8th note
        else:
            dur = gap if gap <= 6 else gap - 2   # sustained, short breath before next
        tokens[onset] = pitch
        for s in range(onset + 1, onset + dur):
            tokens[s] = HOLD
    return tokens


def rule_based_label(seq: TokenSequence) -> Quadrant:
    """Recover the constructed label: count note-ons, inspect pitch classes."""
    threshold = (HIGH_AROUSAL_MIN_ONSETS + LOW_AROUSAL_MAX_ONSETS) / 2 * len(seq) / DEFAULT_SEQ_LEN
    high_arousal = seq.note_on_count() >= threshold
    high_valence = not (seq.pitch_classes() & MINOR_MARKER_PCS)
    if high_valence:
        return Quadrant.HVHA if high_arousal else Quadrant.HVLA
    return Quadrant.LVHA if high_arousal else Quadrant.LVLA


def export_corpus(clips: list[LabeledClip], out_dir, tempo_bpm: float = 120.0) -> Path:
    """Write clips as MIDI files plus a labels.csv in the ingestion schema."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "quadrant"])
        for clip in clips:
            midi = notes_to_midi(tokens_to_notes(clip.sequence.tokens),
                                 grid=clip.sequence.grid, tempo_bpm=tempo_bpm)
            (out / f"{clip.source_id}.mid").write_bytes(midi)
            writer.writerow([clip.source_id, clip.label.q_token])
    return out / "labels.csv"


# ----------------------------------------------------------------------
# Dataset container
# ----------------------------------------------------------------------

DATASET_VERSION = 1


def vocab_hash(grid: int, seq_len: int) -> str:
    layout = f"v1:pitch0-127:hold128:rest129:grid{grid}:len{seq_len}"
    return hashlib.sha256(layout.encode()).hexdigest()[:16]


@dataclass
class Dataset:
    tokens: np.ndarray                 # [n, seq_len] int16
    quadrants: np.ndarray              # [n] int8 Quadrant values
    source_ids: list[str]
    grid: int
    seq_len: int
    vocab_hash: str = field(default="")

    def __post_init__(self):
        if not self.vocab_hash:
            self.vocab_hash = vocab_hash(self.grid, self.seq_len)

    def __len__(self) -> int:
        return len(self.tokens)

    def class_ids(self, task: Task) -> np.ndarray:
        return np.array([remap_labels(Quadrant(int(q)), task).class_id
                         for q in self.quadrants], dtype=np.int64)

    def class_counts(self, task: Task) -> dict[str, int]:
        ids = self.class_ids(task)
        names = TASK_CLASS_NAMES[task]
        return {name: int((ids == c).sum()) for c, name in enumerate(names)}


def dataset_from_clips(clips: list[LabeledClip]) -> Dataset:
    if not clips:
        raise EmptyClipError("no clips to build a dataset from")
    seq_len = len(clips[0].sequence)
    grid = clips[0].sequence.grid
    seen = set()
    for clip in clips:
        if len(clip.sequence) != seq_len:
            raise DomainError(f"clip {clip.source_id} length {len(clip.sequence)} != {seq_len}")
        if clip.source_id in seen:
            raise DomainError(f"duplicate source_id {clip.source_id}")
        seen.add(clip.source_id)
    return Dataset(
        tokens=np.array([c.sequence.tokens for c in clips], dtype=np.int16),
        quadrants=np.array([c.label.value for c in clips], dtype=np.int8),
        source_ids=[c.source_id for c in clips],
        grid=grid,
        seq_len=seq_len,
    )


def save_dataset(path, dataset: Dataset) -> None:
    meta = {"version": DATASET_VERSION, "grid": dataset.grid,
            "seq_len": dataset.seq_len, "vocab_hash": dataset.vocab_hash}
    np.savez_compressed(
        path,
        tokens=dataset.tokens,
        quadrants=dataset.quadrants,
        source_ids=np.array(dataset.source_ids),
        meta=np.array(json.dumps(meta)),
    )


def load_dataset(path) -> Dataset:
    try:
        with np.load(path, allow_pickle=False) as npz:
            meta = json.loads(str(npz["meta"]))
            if meta.get("version") != DATASET_VERSION:
                raise ConfigError(f"dataset version {meta.get('version')} != {DATASET_VERSION}")
            return Dataset(
                tokens=npz["tokens"].astype(np.int16),
                quadrants=npz["quadrants"].astype(np.int8),
                source_ids=[str(s) for s in npz["source_ids"]],
                grid=int(meta["grid"]),
                seq_len=int(meta["seq_len"]),
                vocab_hash=str(meta["vocab_hash"]),
            )
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
