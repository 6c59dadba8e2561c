import mido
import numpy as np
import pretty_midi
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rolldiff.pianoroll import (
    NoteEvent,
    PianoRoll,
    binarize,
    midi_to_notes,
    midi_to_roll,
    notes_to_midi,
    notes_to_roll,
    roll_to_notes,
)

FR = 31.25


def empty(frames=32):
    return np.zeros((88, frames), dtype=np.float32)


binary_rolls = arrays(np.float32, (88, 24), elements=st.sampled_from([0.0, 1.0]))


class TestPianoRoll:
    def test_wrong_rows(self):
        with pytest.raises(ValueError):
            PianoRoll(np.zeros((87, 4)), FR)

    def test_bad_frame_rate(self):
        with pytest.raises(ValueError):
            PianoRoll(empty(), 0.0)

    def test_save_load(self, tmp_path):
        roll = PianoRoll((np.random.default_rng(0).random((88, 9)) > 0.5), FR)
        roll.save(tmp_path / "r.npz")
        back = PianoRoll.load(tmp_path / "r.npz")
        np.testing.assert_array_equal(back.data, roll.data)
        assert back.frame_rate == FR


class TestNoteEvent:
    @pytest.mark.parametrize("pitch", [20, 109])
    def test_pitch_range(self, pitch):
        with pytest.raises(ValueError):
            NoteEvent(pitch, 0.0, 1.0)

    def test_offset_after_onset(self):
        with pytest.raises(ValueError):
            NoteEvent(60, 1.0, 1.0)


class TestBinarize:
    def test_below(self):
        assert binarize(np.full((88, 5), 0.49)).data.sum() == 0

    def test_above(self):
        assert np.all(binarize(np.full((88, 5), 0.51)).data == 1)

    def test_exact_threshold_is_silence(self):
        raw = empty(2)
        raw[:2] = [[0.2, 0.7], [0.5, 0.9]]
        out = binarize(raw, 0.5, FR).data
        np.testing.assert_array_equal(out[:2], [[0, 1], [0, 1]])

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, (88, 7), elements=st.floats(-3, 3, width=32)))
    def test_idempotent(self, raw):
        once = binarize(raw, 0.5, FR)
        np.testing.assert_array_equal(binarize(once).data, once.data)


class TestRollToNotes:
    def test_silence(self):
        assert roll_to_notes(PianoRoll(empty(), FR)) == []

    def test_single_run(self):
        data = empty(40)
        data[39, 10:20] = 1
        (n,) = roll_to_notes(PianoRoll(data, FR))
        assert (n.pitch, n.onset, n.offset) == (60, pytest.approx(0.32), pytest.approx(0.64))

    def test_gap_splits_runs(self):
        data = empty(10)
        data[0, 1:3] = 1
        data[0, 4:6] = 1
        notes = roll_to_notes(PianoRoll(data, FR))
        assert len(notes) == 2 and all(n.pitch == 21 for n in notes)

    def test_runs_touching_edges(self):
        data = empty(6)
        data[87, :] = 1
        (n,) = roll_to_notes(PianoRoll(data, FR))
        assert n.pitch == 108 and n.onset == 0 and n.offset == 6 / FR

    def test_sorted_by_onset_then_pitch(self):
        data = empty(10)
        data[50, 2:4] = 1
        data[10, 2:4] = 1
        data[5, 5:7] = 1
        notes = roll_to_notes(PianoRoll(data, FR))
        assert [(n.onset, n.pitch) for n in notes] == sorted((n.onset, n.pitch) for n in notes)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            roll_to_notes(PianoRoll(np.full((88, 3), 0.5), FR))

    @settings(max_examples=50, deadline=None)
    @given(binary_rolls)
    def test_count_equals_rising_edges(self, data):
        rises = np.diff(np.pad(data, ((0, 0), (1, 0))), axis=1) == 1
        assert len(roll_to_notes(PianoRoll(data, FR))) == rises.sum()

    @settings(max_examples=50, deadline=None)
    @given(binary_rolls)
    def test_rasterize_inverts_extraction(self, data):
        notes = roll_to_notes(PianoRoll(data, FR))
        np.testing.assert_array_equal(notes_to_roll(notes, FR, data.shape[1]).data, data)


class TestMidi:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.mid"
        notes_to_midi([], path)
        assert pretty_midi.PrettyMIDI(str(path)).instruments == [] or not any(
            i.notes for i in pretty_midi.PrettyMIDI(str(path)).instruments
        )
        assert midi_to_roll(path, FR, 16).data.sum() == 0

    def test_single_note_with_independent_reader(self, tmp_path):
        path = tmp_path / "one.mid"
        notes_to_midi([NoteEvent(60, 0.0, 1.0)], path)
        pm = pretty_midi.PrettyMIDI(str(path))
        (note,) = [n for inst in pm.instruments for n in inst.notes]
        assert note.pitch == 60 and note.velocity == 64
        assert note.start == pytest.approx(0.0, abs=1e-9)
        assert note.end == pytest.approx(1.0, abs=1e-9)
        msgs = [m for m in mido.MidiFile(str(path)).tracks[0] if m.type in ("note_on", "note_off")]
        assert msgs[0].type == "note_on" and msgs[0].time == 0

    def test_note_to_roll_floor(self, tmp_path):
        path = tmp_path / "n.mid"
        notes_to_midi([NoteEvent(60, 0.0, 0.5)], path)
        roll = midi_to_roll(path, FR, 32).data
        assert roll[39, :15].all() and roll[39, 15:].sum() == 0
        assert roll.sum() == 15

    def test_out_of_range_pitches_dropped(self, tmp_path):
        mid = mido.MidiFile()
        tr = mido.MidiTrack()
        mid.tracks.append(tr)
        tr.append(mido.Message("note_on", note=10, velocity=80, time=0))
        tr.append(mido.Message("note_on", note=60, velocity=80, time=0))
        tr.append(mido.Message("note_off", note=10, velocity=0, time=480))
        tr.append(mido.Message("note_on", note=60, velocity=0, time=0))
        path = tmp_path / "low.mid"
        mid.save(str(path))
        notes = midi_to_notes(path)
        assert [n.pitch for n in notes] == [60]

    def test_tempo_changes_respected(self, tmp_path):
        # 480 ticks/beat; 120 bpm for the first beat, then 60 bpm
        mid = mido.MidiFile(ticks_per_beat=480)
        tr = mido.MidiTrack()
        mid.tracks.append(tr)
        tr.append(mido.MetaMessage("set_tempo", tempo=500_000, time=0))
        tr.append(mido.Message("note_on", note=64, velocity=90, time=240))
        tr.append(mido.MetaMessage("set_tempo", tempo=1_000_000, time=240))
        tr.append(mido.Message("note_off", note=64, velocity=0, time=480))
        tr.append(mido.Message("note_on", note=70, velocity=90, time=0))
        tr.append(mido.Message("note_off", note=70, velocity=0, time=960))
        path = tmp_path / "tempo.mid"
        mid.save(str(path))
        notes = midi_to_notes(path)
        want = [(n.pitch, n.start, n.end) for n in pretty_midi.PrettyMIDI(str(path)).instruments[0].notes]
        assert sorted(want) == [(64, 0.25, 1.5), (70, 1.5, 3.5)]
        got = [(n.pitch, n.onset, n.offset) for n in notes]
        assert [g[0] for g in got] == [w[0] for w in sorted(want)]
        np.testing.assert_allclose([g[1:] for g in got], [w[1:] for w in sorted(want)], atol=1e-9)

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.mid"
        path.write_bytes(b"not a midi file at all")
        with pytest.raises(ValueError):
            midi_to_notes(path)

    @settings(max_examples=25, deadline=None)
    @given(binary_rolls)
    def test_roll_midi_roll_identity(self, data):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "rt.mid"
            notes_to_midi(roll_to_notes(PianoRoll(data, FR)), path)
            back = midi_to_roll(path, FR, data.shape[1]).data
        np.testing.assert_array_equal(back, data)

    def test_notes_round_trip_within_a_frame(self, tmp_path):
        rng = np.random.default_rng(3)
        notes = []
        for p in rng.choice(np.arange(21, 109), 20, replace=False):
            on = rng.uniform(0, 10)
            notes.append(NoteEvent(int(p), on, on + rng.uniform(0.05, 2)))
        path = tmp_path / "rt.mid"
        notes_to_midi(notes, path)
        back = {n.pitch: n for n in midi_to_notes(path)}
        for n in notes:
            assert abs(back[n.pitch].onset - n.onset) < 1 / FR
            assert abs(back[n.pitch].offset - n.offset) < 1 / FR

    def test_back_to_back_notes_stay_separate(self, tmp_path):
        path = tmp_path / "b2b.mid"
        notes_to_midi([NoteEvent(60, 0.0, 0.5), NoteEvent(60, 0.5, 1.0)], path)
        assert len(midi_to_notes(path)) == 2
