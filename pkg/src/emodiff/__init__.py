"""Emotion-conditioned symbolic music generation with a few-step latent diffusion GAN.

Pipeline: MIDI -> monophonic tokens -> sequence-VAE latents -> 4-step
denoising diffusion GAN conditioned on emotion labels -> decoded MIDI,
evaluated with Fréchet distance, MMD, and an independent emotion classifier.
"""
from .checkpoints import TOOL_VERSION as __version__
from .diffusion_core import (DiffusionSchedule, forward_step, forward_trajectory,
                             make_schedule, marginal, posterior_params)
from .errors import (CheckpointError, ConfigError, DomainError, EmodiffError,
                     EmptyClipError, MidiParseError, TaskMismatchError,
                     TrainingDivergedError)
from .midi_io import Note, parse_midi, tokens_to_midi
from .music_data import (LabeledClip, Quadrant, Task, TaskLabel, TokenSequence,
                         extract_monophonic, remap_labels, rule_based_label,
                         synth_corpus)

__all__ = [
    "__version__",
    "CheckpointError", "ConfigError", "DomainError", "EmodiffError",
    "EmptyClipError", "MidiParseError", "TaskMismatchError", "TrainingDivergedError",
    "DiffusionSchedule", "make_schedule", "forward_step", "forward_trajectory",
    "marginal", "posterior_params",
    "Note", "parse_midi", "tokens_to_midi",
    "LabeledClip", "Quadrant", "Task", "TaskLabel", "TokenSequence",
    "extract_monophonic", "remap_labels", "rule_based_label", "synth_corpus",
]
