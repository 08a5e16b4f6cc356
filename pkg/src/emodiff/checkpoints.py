"""Versioned checkpoint container shared by the VAE, DDGAN, and classifier."""
from __future__ import annotations

import torch

from .errors import CheckpointError

TOOL_VERSION = "0.1.0"
CHECKPOINT_FORMAT = 1


def save_checkpoint(path, kind: str, payload: dict, config_hash: str,
                    task: str = "") -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "tool_version": TOOL_VERSION,
        "kind": kind,
        "task": task,
        "config_hash": config_hash,
        "payload": payload,
    }, path)


def load_checkpoint(path, expected_kind: str,
                    expected_config_hash: str | None = None) -> dict:
    """Read and validate a checkpoint; raises CheckpointError on any mismatch."""
    try:
        blob = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(
            f"cannot read checkpoint {path}: {exc} "
            f"(expected format v{CHECKPOINT_FORMAT}, tool {TOOL_VERSION})") from exc
    if not isinstance(blob, dict) or "format" not in blob:
        raise CheckpointError(f"{path} is not an emodiff checkpoint")
    if blob["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: checkpoint format {blob['format']} != "
                              f"supported {CHECKPOINT_FORMAT} (written by tool "
                              f"{blob.get('tool_version', '?')})")
    if blob["kind"] != expected_kind:
        raise CheckpointError(f"{path}: checkpoint kind {blob['kind']!r}, "
                              f"expected {expected_kind!r}")
    if expected_config_hash is not None and blob["config_hash"] != expected_config_hash:
        raise CheckpointError(f"{path}: config hash {blob['config_hash']} does not match "
                              f"active config {expected_config_hash}")
    return blob
