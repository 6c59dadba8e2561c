"""Dataset manifests, layout ingestion and the synthetic toy corpus."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    SAMPLE_RATE,
    SEGMENT_FRAMES,
    SEGMENT_SAMPLES,
    FeatureConfig,
    cached_conditioner,
    load_and_resample,
    mel_conditioner,
    write_wav,
)
from .pianoroll import NoteEvent, midi_to_notes, midi_to_roll, notes_to_midi

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
LAYOUTS = ("maestro", "maps", "flat")
AUDIO_SUFFIXES = (".wav", ".flac")
MIDI_SUFFIXES = (".mid", ".midi")

# MAPS: synthesized pianos train, the two Disklavier recordings test
MAPS_TEST_INSTRUMENTS = ("ENSTDkAm", "ENSTDkCl")


class LayoutError(ValueError):
    pass


@dataclass
class ManifestEntry:
    midi: str
    split: str = "train"
    audio: str | None = None
    piece: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    kind: str = "paired"
    excluded: list[dict] = field(default_factory=list)
    root: str | None = None

    def __post_init__(self):
        if self.kind not in ("paired", "rolls_only"):
            raise ValueError(f"kind must be 'paired' or 'rolls_only', got {self.kind!r}")
        for e in self.entries:
            if self.kind == "paired" and not e.audio:
                raise ValueError(f"paired manifest entry without audio: {e.midi}")
            if self.kind == "rolls_only" and e.audio:
                raise ValueError(f"rolls_only manifest entry has audio: {e.midi}")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "entries": [asdict(e) for e in self.entries], "excluded": self.excluded}
        if self.root is not None:
            d["root"] = self.root
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """Read a manifest; entry paths resolve against ``root`` or else the file's directory."""
        path = Path(path)
        d = json.loads(path.read_text())
        root = d.get("root") or str(path.resolve().parent)
        return cls([ManifestEntry(**e) for e in d["entries"]], d["kind"], d.get("excluded", []), root)

    def as_rolls_only(self) -> "DatasetManifest":
        entries = [ManifestEntry(e.midi, e.split, None, e.piece) for e in self.entries]
        return DatasetManifest(entries, "rolls_only", list(self.excluded), self.root)


def _find_audio(midi: Path) -> Path | None:
    for suf in AUDIO_SUFFIXES:
        cand = midi.with_suffix(suf)
        if cand.exists():
            return cand
    return None


def _ingest_flat(root: Path) -> DatasetManifest:
    midis = sorted(p for p in root.rglob("*") if p.suffix.lower() in MIDI_SUFFIXES)
    pairs = [(m, _find_audio(m)) for m in midis]
    if not any(a for _, a in pairs):
        entries = [ManifestEntry(str(m.relative_to(root)), "train") for m, _ in pairs]
        return DatasetManifest(entries, "rolls_only")
    entries, excluded = [], []
    for m, a in pairs:
        rel = str(m.relative_to(root))
        if a is None:
            excluded.append({"path": rel, "reason": "no audio counterpart"})
        else:
            entries.append(ManifestEntry(rel, "train", str(a.relative_to(root))))
    return DatasetManifest(entries, "paired", excluded)


def _read_maestro_metadata(root: Path) -> list[dict]:
    csvs = sorted(root.glob("maestro-v*.csv"))
    if csvs:
        with open(csvs[-1], newline="") as fh:
            return list(csv.DictReader(fh))
    jsons = sorted(root.glob("maestro-v*.json"))
    if not jsons:
        raise LayoutError(f"{root}: maestro layout expects a maestro-v*.csv or maestro-v*.json metadata file")
    data = json.loads(jsons[-1].read_text())
    if isinstance(data, list):  # v2 json: list of records
        return data
    keys = list(data["midi_filename"].keys())  # v3 json: column-oriented
    return [{col: data[col][k] for col in data} for k in keys]


def _ingest_maestro(root: Path) -> DatasetManifest:
    entries, excluded = [], []
    for row in _read_maestro_metadata(root):
        midi, audio = row["midi_filename"], row.get("audio_filename")
        missing = [p for p in (midi, audio) if p and not (root / p).exists()]
        if missing:
            excluded.append({"path": midi, "reason": f"missing file(s): {missing}"})
            continue
        piece = f"{row.get('canonical_composer', '')} / {row.get('canonical_title', '')}"
        entries.append(ManifestEntry(midi, row["split"], audio, piece))
    return DatasetManifest(entries, "paired", excluded)


_MAPS_RE = re.compile(r"^MAPS_MUS-(?P<piece>.+)_(?P<inst>[^_]+)$")


def _ingest_maps(root: Path, remove_overlap: bool) -> DatasetManifest:
    midis = sorted(p for p in root.rglob("MAPS_MUS-*") if p.suffix.lower() in MIDI_SUFFIXES)
    if not midis:
        raise LayoutError(f"{root}: maps layout expects <instrument>/MUS/MAPS_MUS-<piece>_<instrument>.mid files")
    entries, excluded = [], []
    for m in midis:
        match = _MAPS_RE.match(m.stem)
        audio = _find_audio(m)
        rel = str(m.relative_to(root))
        if not match:
            excluded.append({"path": rel, "reason": "unrecognised MAPS file name"})
            continue
        if audio is None:
            excluded.append({"path": rel, "reason": "no audio counterpart"})
            continue
        split = "test" if match["inst"] in MAPS_TEST_INSTRUMENTS else "train"
        entries.append(ManifestEntry(rel, split, str(audio.relative_to(root)), match["piece"]))
    if remove_overlap:
        test_pieces = {e.piece for e in entries if e.split == "test"}
        kept = []
        for e in entries:
            if e.split == "train" and e.piece in test_pieces:
                excluded.append({"path": e.midi, "reason": "piece overlaps test split"})
            else:
                kept.append(e)
        removed = len(entries) - len(kept)
        logger.info("removed %d training entries overlapping the test split", removed)
        entries = kept
    return DatasetManifest(entries, "paired", excluded)


def ingest(root, layout: str = "flat", remove_overlap: bool = False) -> DatasetManifest:
    """Build a manifest from a local dataset tree. Paths are stored relative to ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"{root} is not a directory")
    if layout == "flat":
        manifest = _ingest_flat(root)
    elif layout == "maestro":
        manifest = _ingest_maestro(root)
    elif layout == "maps":
        manifest = _ingest_maps(root, remove_overlap)
    else:
        raise LayoutError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    for item in manifest.excluded:
        logger.warning("excluded %s: %s", item["path"], item["reason"])
    manifest.root = str(root.resolve())
    return manifest


def random_notes(
    rng: np.random.Generator,
    duration: float,
    frame_rate: float,
    notes_per_second: float = 2.0,
    pitch_range: tuple[int, int] = (48, 84),
) -> list[NoteEvent]:
    """Sparse random notes on the frame grid; same-pitch notes never touch."""
    n_frames = int(round(duration * frame_rate))
    count = rng.poisson(notes_per_second * duration)
    busy: dict[int, np.ndarray] = {}
    notes = []
    for _ in range(count):
        pitch = int(rng.integers(pitch_range[0], pitch_range[1] + 1))
        length = int(rng.integers(4, 24))
        start = int(rng.integers(0, max(n_frames - length, 1)))
        stop = min(start + length, n_frames)
        occ = busy.setdefault(pitch, np.zeros(n_frames + 1, dtype=bool))
        if occ[max(start - 1, 0): stop + 1].any():
            continue
        occ[start:stop] = True
        notes.append(NoteEvent(pitch, start / frame_rate, stop / frame_rate))
    return sorted(notes, key=lambda n: (n.onset, n.pitch))


def synthesize(notes: list[NoteEvent], num_samples: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Additive sines at each note's fundamental plus two weaker harmonics."""
    audio = np.zeros(num_samples, dtype=np.float64)
    ramp = int(0.005 * sample_rate)
    for n in notes:
        a = int(round(n.onset * sample_rate))
        b = min(int(round(n.offset * sample_rate)), num_samples)
        if b <= a:
            continue
        t = np.arange(b - a) / sample_rate
        f0 = 440.0 * 2 ** ((n.pitch - 69) / 12)
        tone = sum(amp * np.sin(2 * np.pi * k * f0 * t) for k, amp in ((1, 1.0), (2, 0.4), (3, 0.2)) if k * f0 < sample_rate / 2)
        env = np.exp(-1.5 * t)
        r = min(ramp, (b - a) // 2)
        if r:
            env[:r] *= np.linspace(0, 1, r)
            env[-r:] *= np.linspace(1, 0, r)
        audio[a:b] += 0.15 * tone * env
    return np.clip(audio, -1.0, 1.0)


def make_toy_dataset(
    num_items: int,
    seed: int,
    out_dir,
    num_samples: int = SEGMENT_SAMPLES,
    notes_per_second: float = 2.0,
) -> DatasetManifest:
    """Write ``num_items`` (wav, mid) pairs plus ``manifest.json``; fully determined by ``seed``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    fr = SAMPLE_RATE / FeatureConfig().hop_length
    entries = []
    for i in range(num_items):
        notes = random_notes(rng, num_samples / SAMPLE_RATE, fr, notes_per_second)
        stem = f"toy_{i:04d}"
        notes_to_midi(notes, out / f"{stem}.mid")
        write_wav(out / f"{stem}.wav", synthesize(notes, num_samples))
        entries.append(ManifestEntry(f"{stem}.mid", "train", f"{stem}.wav"))
    manifest = DatasetManifest(entries, "paired")
    # saved without a root so the directory can be moved
    manifest.save(out / "manifest.json")
    manifest.root = str(out.resolve())
    return manifest


def load_segments(
    manifest: DatasetManifest,
    root=None,
    split: str | None = "train",
    segment_frames: int = SEGMENT_FRAMES,
    cfg: FeatureConfig = FeatureConfig(),
    cache_dir=None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Cut each entry into non-overlapping aligned segments.

    Returns rolls ``(N, 88, segment_frames)`` and, for paired manifests,
    conditioners ``(N, 229, segment_frames)``. Rolls-only manifests return
    ``None`` for the conditioners. A trailing partial segment is zero-padded.
    """
    root = Path(root if root is not None else manifest.root or ".")
    entries = manifest.entries if split is None else manifest.split(split)
    rolls, mels = [], []
    for e in entries:
        if manifest.kind == "paired":
            if cache_dir is not None:
                mel = cached_conditioner(root / e.audio, cache_dir, cfg)
            else:
                mel = mel_conditioner(load_and_resample(root / e.audio, cfg.sample_rate), cfg)
            n = mel.shape[1]
        else:
            mel = None
            notes = midi_to_notes(root / e.midi)
            end = max((x.offset for x in notes), default=0.0)
            n = max(int(np.ceil(end * cfg.frame_rate)), 1)
        roll = midi_to_roll(root / e.midi, cfg.frame_rate, n).data
        if mel is not None and mel.shape[1] != roll.shape[1]:
            raise ValueError(f"{e.midi}: conditioner and roll frame counts differ")
        n_seg = -(-n // segment_frames)
        pad = n_seg * segment_frames - n
        roll = np.pad(roll, ((0, 0), (0, pad)))
        if mel is not None:
            mel = np.pad(mel, ((0, 0), (0, pad)))
        for s in range(n_seg):
            sl = slice(s * segment_frames, (s + 1) * segment_frames)
            rolls.append(roll[:, sl])
            if mel is not None:
                mels.append(mel[:, sl])
    if not rolls:
        raise ValueError("no segments: manifest split is empty")
    return np.stack(rolls), (np.stack(mels) if manifest.kind == "paired" else None)
