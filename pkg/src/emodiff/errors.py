"""Exception types shared across the toolkit."""
from __future__ import annotations


class EmodiffError(Exception):
    """Base class for every error raised by this package."""


class MidiParseError(EmodiffError):
    """Malformed Standard MIDI File.  Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyClipError(EmodiffError):
    """A clip or window contains no sounding notes."""


class DomainError(EmodiffError):
    """An argument is outside an operation's domain (token id, shape, class id...)."""


class ConfigError(EmodiffError):
    """Invalid configuration value, file, or schedule bound."""


class CheckpointError(EmodiffError):
    """Checkpoint cannot be read or is incompatible with the active config."""


class TaskMismatchError(EmodiffError):
    """Artifacts trained for different conditioning tasks were combined."""


class TrainingDivergedError(EmodiffError):
    """Training hit a non-finite loss.  Holds the last finite parameter snapshot."""

    def __init__(self, message: str, epoch: int, batch: int, last_state: dict | None = None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch
        self.last_state = last_state
