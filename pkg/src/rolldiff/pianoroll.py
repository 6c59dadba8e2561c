"""Piano-roll data model, note extraction and MIDI I/O.

Rows map MIDI notes 21..108 (A0..C8) in ascending order. This mapping is the
one place pitch rows are defined; evaluation and the dataset code go through
:func:`pitch_to_row` / :func:`row_to_pitch`.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import mido
import numpy as np

logger = logging.getLogger(__name__)

NUM_PITCHES = 88
MIN_PITCH = 21
MAX_PITCH = 108
DEFAULT_THRESHOLD = 0.5
EXPORT_VELOCITY = 64

# 1 tick == 1 ms, so frame boundaries at 31.25 fps (32 ms) land on whole ticks.
TICKS_PER_BEAT = 1000
TEMPO_US_PER_BEAT = 1_000_000

# Guards floor() against float noise when a time sits exactly on a frame edge.
_FRAME_EPS = 1e-6


def pitch_to_row(pitch: int) -> int:
    return pitch - MIN_PITCH


def row_to_pitch(row: int) -> int:
    return row + MIN_PITCH


@dataclass
class PianoRoll:
    data: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] != NUM_PITCHES:
            raise ValueError(f"piano roll must have shape (88, frames), got {self.data.shape}")
        if not self.frame_rate > 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    def save(self, path) -> None:
        np.savez_compressed(path, data=self.data, frame_rate=np.float64(self.frame_rate))

    @classmethod
    def load(cls, path) -> "PianoRoll":
        with np.load(path) as f:
            return cls(f["data"], float(f["frame_rate"]))


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float

    def __post_init__(self):
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise ValueError(f"pitch {self.pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} must exceed onset {self.onset}")


def sort_notes(notes: Iterable[NoteEvent]) -> list[NoteEvent]:
    return sorted(notes, key=lambda n: (n.onset, n.pitch, n.offset))


def binarize(raw, threshold: float = DEFAULT_THRESHOLD, frame_rate: float | None = None) -> PianoRoll:
    """Threshold a posteriorgram. Strictly greater-than: ``threshold`` itself maps to 0."""
    if isinstance(raw, PianoRoll):
        frame_rate = raw.frame_rate if frame_rate is None else frame_rate
        raw = raw.data
    if frame_rate is None:
        from .features import FRAME_RATE

        frame_rate = FRAME_RATE
    return PianoRoll((np.asarray(raw) > threshold).astype(np.float32), frame_rate)


def roll_to_notes(roll: PianoRoll) -> list[NoteEvent]:
    """One event per maximal run of active frames in each pitch row."""
    if not roll.is_binary():
        raise ValueError("roll_to_notes needs a binary roll; call binarize() first")
    active = roll.data.astype(np.int8)
    padded = np.pad(active, ((0, 0), (1, 1)))
    diff = np.diff(padded, axis=1)
    # row-major nonzero order pairs the k-th rise with the k-th fall
    rows, starts = np.nonzero(diff == 1)
    _, stops = np.nonzero(diff == -1)
    fr = roll.frame_rate
    notes = [
        NoteEvent(row_to_pitch(int(r)), int(a) / fr, int(b) / fr)
        for r, a, b in zip(rows, starts, stops)
    ]
    return sort_notes(notes)


def notes_to_roll(notes: Iterable[NoteEvent], frame_rate: float, num_frames: int) -> PianoRoll:
    """Rasterize: frames ``[floor(on*fr), floor(off*fr))`` are set for each note."""
    data = np.zeros((NUM_PITCHES, num_frames), dtype=np.float32)
    for n in notes:
        start = int(np.floor(n.onset * frame_rate + _FRAME_EPS))
        stop = int(np.floor(n.offset * frame_rate + _FRAME_EPS))
        start, stop = max(start, 0), min(stop, num_frames)
        if stop > start:
            data[pitch_to_row(n.pitch), start:stop] = 1.0
    return PianoRoll(data, frame_rate)


def notes_to_midi(notes: Sequence[NoteEvent], out, velocity: int = EXPORT_VELOCITY) -> None:
    """Write a single-track standard MIDI file with fixed velocity."""
    ticks_per_sec = TICKS_PER_BEAT * 1_000_000 / TEMPO_US_PER_BEAT
    events = []
    for n in notes:
        on = int(round(n.onset * ticks_per_sec))
        off = max(int(round(n.offset * ticks_per_sec)), on + 1)
        # note-offs sort before note-ons at equal ticks so back-to-back notes stay separate
        events.append((off, 0, n.pitch))
        events.append((on, 1, n.pitch))
    events.sort()

    mid = mido.MidiFile(type=0, ticks_per_beat=TICKS_PER_BEAT)
    track = mido.MidiTrack()
    mid.tracks.append(track)
    track.append(mido.MetaMessage("set_tempo", tempo=TEMPO_US_PER_BEAT, time=0))
    now = 0
    for tick, is_on, pitch in events:
        kind = "note_on" if is_on else "note_off"
        vel = velocity if is_on else 0
        track.append(mido.Message(kind, note=pitch, velocity=vel, time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid.save(os.fspath(out))


def midi_to_notes(path) -> list[NoteEvent]:
    """Parse note events from any standard MIDI file, honouring tempo changes.

    Notes outside the 88-key range are skipped and counted in a warning.
    Overlapping notes on one pitch are paired first-in, first-out.
    """
    try:
        mid = mido.MidiFile(os.fspath(path))
    except (OSError, EOFError, ValueError, KeyError, IndexError) as exc:
        raise ValueError(f"could not parse MIDI file {path}: {exc}") from exc

    now = 0.0
    open_notes: dict[tuple[int, int], list[float]] = {}
    notes = []
    dropped = 0
    for msg in mid:
        now += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            open_notes.setdefault((msg.channel, msg.note), []).append(now)
        elif msg.type in ("note_off", "note_on"):
            starts = open_notes.get((msg.channel, msg.note))
            if not starts:
                continue
            onset = starts.pop(0)
            if now <= onset:
                continue
            if MIN_PITCH <= msg.note <= MAX_PITCH:
                notes.append(NoteEvent(msg.note, onset, now))
            else:
                dropped += 1
    if dropped:
        logger.warning("%s: dropped %d notes outside the piano range", path, dropped)
    return sort_notes(notes)


def midi_to_roll(path, frame_rate: float, num_frames: int) -> PianoRoll:
    return notes_to_roll(midi_to_notes(path), frame_rate, num_frames)
