from __future__ import annotations

import numpy as np
import pytest

from emodiff.errors import DomainError, EmptyClipError, MidiParseError
from emodiff.midi_io import (HOLD, REST, Note, parse_midi, tokens_to_midi,
                             tokens_to_notes)
from emodiff.music_data import extract_monophonic


def test_single_note_round_trip():
    # one C4 quarter note at t=0 on a 16th grid
    data = tokens_to_midi([60, HOLD, HOLD, HOLD], grid=4)
    assert parse_midi(data, grid=4) == [Note(60, 0, 4)]


def test_parser_keeps_overlapping_notes():
    # simultaneous 60 and 64; monophony is the skyline's job, not the parser's
    notes = [Note(60, 0, 4), Note(64, 0, 4)]
    from emodiff.midi_io import notes_to_midi
    parsed = parse_midi(notes_to_midi(notes, grid=4), grid=4)
    assert sorted(parsed) == sorted(notes)


def test_truncated_header_is_parse_error():
    with pytest.raises(MidiParseError):
        parse_midi(b"MThd\x00\x00\x00\x06\x00", grid=4)


def test_bad_magic_reports_offset():
    with pytest.raises(MidiParseError) as err:
        parse_midi(b"XXXX" + b"\x00" * 20, grid=4)
    assert err.value.offset == 0


def test_missing_track_magic_reports_offset():
    good = tokens_to_midi([60, HOLD], grid=4)
    bad = good[:14] + b"XTrk" + good[18:]
    with pytest.raises(MidiParseError) as err:
        parse_midi(bad, grid=4)
    assert err.value.offset == 14


def test_empty_note_list_is_empty_clip_error():
    from emodiff.midi_io import notes_to_midi
    with pytest.raises(EmptyClipError):
        parse_midi(notes_to_midi([], grid=4), grid=4)


def test_tokens_to_midi_rejects_bad_tokens():
    with pytest.raises(DomainError):
        tokens_to_midi([130, REST], grid=4)
    with pytest.raises(DomainError):
        tokens_to_midi([HOLD, 60], grid=4)            # hold at start
    with pytest.raises(DomainError):
        tokens_to_midi([60, REST, HOLD], grid=4)      # hold after rest


def test_tokens_to_notes_examples():
    assert tokens_to_notes([60, HOLD, HOLD, HOLD]) == [Note(60, 0, 4)]
    assert tokens_to_notes([60, REST, REST, 60]) == [Note(60, 0, 1), Note(60, 3, 1)]
    assert tokens_to_notes([60, 60, HOLD, REST]) == [Note(60, 0, 1), Note(60, 1, 2)]


def test_tempo_is_encoded():
    fast = tokens_to_midi([60, HOLD], grid=4, tempo_bpm=240.0)
    slow = tokens_to_midi([60, HOLD], grid=4, tempo_bpm=60.0)
    assert fast != slow
    assert parse_midi(fast, grid=4) == parse_midi(slow, grid=4)


def test_writer_is_deterministic():
    tokens = [60, HOLD, 64, REST, 67, HOLD, HOLD, REST]
    assert tokens_to_midi(tokens) == tokens_to_midi(tokens)


def random_valid_tokens(rng: np.random.Generator, length: int = 32) -> list[int]:
    """Random token sequence honoring the invariants, with >= 1 note-on."""
    tokens: list[int] = []
    prev = REST
    for i in range(length):
        if i == 0 or prev == REST:
            choices = [int(rng.integers(0, 128)), REST]
            tok = choices[int(rng.integers(0, 2))]
        else:
            r = rng.random()
            if r < 0.4:
                tok = HOLD
            elif r < 0.7:
                tok = int(rng.integers(0, 128))
            else:
                tok = REST
        tokens.append(tok)
        prev = tok
    if all(t == REST for t in tokens):
        tokens[int(rng.integers(0, length))] = int(rng.integers(0, 128))
    return tokens


@pytest.mark.parametrize("seed", [0, 1])
def test_round_trip_property(seed):
    # tokens -> MIDI -> notes -> skyline is the identity on valid sequences
    rng = np.random.default_rng(seed)
    for _ in range(250):
        tokens = random_valid_tokens(rng)
        data = tokens_to_midi(tokens, grid=4)
        notes = parse_midi(data, grid=4)
        back = extract_monophonic(notes, length=32, grid=4)
        assert list(back.tokens) == tokens


def test_foreign_ppq_quantization():
    # a file written at 480 ppq still quantizes onto the 16th grid
    ppq = 480
    track = bytearray()
    track += b"\x00" + bytes([0xFF, 0x51, 0x03]) + (500000).to_bytes(3, "big")
    track += b"\x00" + bytes([0x90, 60, 90])
    track += bytes([0x83, 0x60]) + bytes([0x80, 60, 0])   # delta 480 = one quarter
    track += b"\x00" + bytes([0xFF, 0x2F, 0x00])
    data = (b"MThd" + (6).to_bytes(4, "big") + (0).to_bytes(2, "big")
            + (1).to_bytes(2, "big") + ppq.to_bytes(2, "big")
            + b"MTrk" + len(track).to_bytes(4, "big") + bytes(track))
    assert parse_midi(data, grid=4) == [Note(60, 0, 4)]


def test_running_status_and_velocity_zero_note_off():
    ppq = 480
    track = bytearray()
    track += b"\x00" + bytes([0x90, 60, 90])
    track += bytes([0x81, 0x70]) + bytes([60, 0])          # running status, vel 0 = off
    track += b"\x00" + bytes([0xFF, 0x2F, 0x00])
    data = (b"MThd" + (6).to_bytes(4, "big") + (0).to_bytes(2, "big")
            + (1).to_bytes(2, "big") + ppq.to_bytes(2, "big")
            + b"MTrk" + len(track).to_bytes(4, "big") + bytes(track))
    assert parse_midi(data, grid=4) == [Note(60, 0, 2)]    # 240 ticks = 2 steps
