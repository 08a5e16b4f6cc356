"""Standard MIDI File reader/writer for fixed-grid monophonic clips.

Only the subset of SMF needed here is supported:

    read:  format 0 or 1, any PPQ division, running status, note-on with
           velocity 0 treated as note-off, meta and sysex events skipped.
    write: format 0, single track, one tempo event, fixed velocity,
           PPQ = 120 * grid so every grid step lands on an exact tick.

Notes are exchanged as ``Note(pitch, onset_step, duration_steps)`` tuples
quantized to the caller's grid (steps per quarter note).
"""
from __future__ import annotations

from typing import NamedTuple

from .errors import DomainError, EmptyClipError, MidiParseError

TICKS_PER_STEP = 120
DEFAULT_VELOCITY = 96

HOLD = 128
REST = 129
VOCAB_SIZE = 130


class Note(NamedTuple):
    pitch: int
    onset: int      # grid steps
    duration: int   # grid steps, >= 1


def _encode_vlq(value: int) -> bytes:
    """Variable-length quantity used for delta times."""
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _read_vlq(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    start = pos
    while True:
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity", start)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
        if pos - start > 4:
            raise MidiParseError("variable-length quantity longer than 4 bytes", start)


def tokens_to_midi(tokens, grid: int = 4, tempo_bpm: float = 120.0) -> bytes:
    """Render a token sequence (note-on / hold / rest) as SMF format-0 bytes.

    Raises DomainError on any token outside [0, 129] or an illegal hold
    (hold at step 0 or immediately after a rest).
    """
    if tempo_bpm <= 0:
        raise DomainError(f"tempo must be positive, got {tempo_bpm}")
    notes = tokens_to_notes(tokens)
    return notes_to_midi(notes, grid=grid, tempo_bpm=tempo_bpm)


def tokens_to_notes(tokens) -> list[Note]:
    """Expand a token sequence into quantized notes, validating invariants."""
    notes: list[Note] = []
    open_pitch: int | None = None
    open_onset = 0
    for i, tok in enumerate(tokens):
        tok = int(tok)
        if not 0 <= tok < VOCAB_SIZE:
            raise DomainError(f"token {tok} at step {i} outside vocabulary [0, {VOCAB_SIZE - 1}]")
        if tok == HOLD:
            if open_pitch is None:
                where = "at step 0" if i == 0 else f"after rest at step {i}"
                raise DomainError(f"hold token {where} has nothing to sustain")
            continue
        if open_pitch is not None:
            notes.append(Note(open_pitch, open_onset, i - open_onset))
            open_pitch = None
        if tok != REST:
            open_pitch = tok
            open_onset = i
    if open_pitch is not None:
        notes.append(Note(open_pitch, open_onset, len(tokens) - open_onset))
    return notes


def notes_to_midi(notes: list[Note], grid: int = 4, tempo_bpm: float = 120.0) -> bytes:
    ppq = TICKS_PER_STEP * grid
    # (tick, order, status byte, pitch, velocity); note-offs sort before note-ons
    events: list[tuple[int, int, int, int, int]] = []
    for pitch, onset, duration in notes:
        if not 0 <= pitch <= 127:
            raise DomainError(f"pitch {pitch} outside [0, 127]")
        if duration < 1:
            raise DomainError(f"non-positive duration {duration} for pitch {pitch}")
        on_tick = onset * TICKS_PER_STEP
        off_tick = (onset + duration) * TICKS_PER_STEP
        events.append((on_tick, 1, 0x90, pitch, DEFAULT_VELOCITY))
        events.append((off_tick, 0, 0x80, pitch, 0))
    events.sort(key=lambda e: (e[0], e[1], e[3]))

    track = bytearray()
    tempo_us = round(60_000_000 / tempo_bpm)
    track += _encode_vlq(0) + bytes([0xFF, 0x51, 0x03]) + tempo_us.to_bytes(3, "big")
    tick = 0
    for ev_tick, _, status, pitch, velocity in events:
        track += _encode_vlq(ev_tick - tick)
        track += bytes([status, pitch, velocity])
        tick = ev_tick
    track += _encode_vlq(0) + bytes([0xFF, 0x2F, 0x00])

    header = b"MThd" + (6).to_bytes(4, "big")
    header += (0).to_bytes(2, "big") + (1).to_bytes(2, "big") + ppq.to_bytes(2, "big")
    return bytes(header + b"MTrk" + len(track).to_bytes(4, "big") + track)


def parse_midi(data: bytes, grid: int = 4) -> list[Note]:
    """Parse SMF bytes into notes quantized to `grid` steps per quarter.

    Raises MidiParseError (with byte offset) on malformed input and
    EmptyClipError when the file contains no notes.
    """
    if len(data) < 14:
        raise MidiParseError("file shorter than an SMF header", 0)
    if data[0:4] != b"MThd":
        raise MidiParseError("missing MThd magic", 0)
    header_len = int.from_bytes(data[4:8], "big")
    if header_len < 6:
        raise MidiParseError(f"header chunk length {header_len} < 6", 4)
    fmt = int.from_bytes(data[8:10], "big")
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    n_tracks = int.from_bytes(data[10:12], "big")
    division = int.from_bytes(data[12:14], "big")
    if division & 0x8000:
        raise MidiParseError("SMPTE time division not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks-per-quarter division", 12)

    pos = 8 + header_len
    raw: list[tuple[int, bool, int]] = []   # (tick, is_on, pitch)
    for _ in range(n_tracks):
        if pos + 8 > len(data):
            raise MidiParseError("truncated track header", pos)
        if data[pos:pos + 4] != b"MTrk":
            raise MidiParseError("missing MTrk magic", pos)
        track_len = int.from_bytes(data[pos + 4:pos + 8], "big")
        pos += 8
        end = pos + track_len
        if end > len(data):
            raise MidiParseError(f"track length {track_len} runs past end of file", pos - 4)
        pos = _parse_track(data, pos, end, raw)

    return _quantize(raw, division, grid)


def _parse_track(data: bytes, pos: int, end: int, raw: list[tuple[int, bool, int]]) -> int:
    tick = 0
    status = 0
    while pos < end:
        delta, pos = _read_vlq(data, pos)
        tick += delta
        if pos >= end:
            raise MidiParseError("event after final delta time missing", pos)
        byte = data[pos]
        if byte & 0x80:
            status = byte
            pos += 1
        elif status == 0:
            raise MidiParseError("running status with no prior status byte", pos)

        if status == 0xFF:                       # meta event
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            length, pos = _read_vlq(data, pos + 1)
            pos += length
            if pos > end:
                raise MidiParseError("meta event runs past track end", pos)
            if meta_type == 0x2F:                # end of track
                return end
            status = 0                           # meta cancels running status
        elif status in (0xF0, 0xF7):             # sysex
            length, pos = _read_vlq(data, pos)
            pos += length
            if pos > end:
                raise MidiParseError("sysex event runs past track end", pos)
            status = 0
        else:
            kind = status & 0xF0
            n_data = 1 if kind in (0xC0, 0xD0) else 2
            if pos + n_data > end:
                raise MidiParseError("truncated channel event", pos)
            if kind == 0x90:
                pitch, velocity = data[pos], data[pos + 1]
                raw.append((tick, velocity > 0, pitch))
            elif kind == 0x80:
                raw.append((tick, False, data[pos]))
            pos += n_data
    return pos


def _quantize(raw: list[tuple[int, bool, int]], ppq: int, grid: int) -> list[Note]:
    notes: list[tuple[int, int, int]] = []      # (onset_tick, pitch, off_tick)
    open_notes: dict[int, list[int]] = {}       # pitch -> FIFO of onset ticks
    max_tick = 0
    for tick, is_on, pitch in raw:
        max_tick = max(max_tick, tick)
        if is_on:
            open_notes.setdefault(pitch, []).append(tick)
        elif open_notes.get(pitch):
            onset = open_notes[pitch].pop(0)
            notes.append((onset, pitch, tick))
    for pitch, onsets in open_notes.items():    # unterminated notes end at track end
        for onset in onsets:
            notes.append((onset, pitch, max_tick))

    out = []
    scale = grid / ppq
    for onset_tick, pitch, off_tick in notes:
        if off_tick <= onset_tick:
            continue
        onset = int(onset_tick * scale + 0.5)
        duration = max(1, int(off_tick * scale + 0.5) - onset)
        out.append(Note(pitch, onset, duration))
    if not out:
        raise EmptyClipError("MIDI file contains no notes")
    out.sort(key=lambda n: (n.onset, n.pitch))
    return out
