"""Note-wise onset F1 with maximum one-to-one matching."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .pianoroll import NoteEvent, midi_to_notes

ONSET_TOLERANCE = 0.05
# onset differences are rounded before the <= test so 1.05 - 1.00 counts as 0.05
_DECIMALS = 9

MIDI_SUFFIXES = (".mid", ".midi")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    precision: float
    recall: float
    f1: float
    tolerance: float = ONSET_TOLERANCE

    @property
    def num_matches(self) -> int:
        return len(self.pairs)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def admissible(p: NoteEvent, r: NoteEvent, tol: float) -> bool:
    return p.pitch == r.pitch and round(abs(p.onset - r.onset), _DECIMALS) <= tol


def max_bipartite_matching(adj: list[list[int]], n_right: int) -> list[int]:
    """Kuhn's augmenting-path matching. Returns ``match_of_right`` (-1 = free)."""
    match_right = [-1] * n_right

    def augment(u, seen):
        for v in adj[u]:
            if v in seen:
                continue
            seen.add(v)
            if match_right[v] == -1 or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    for u in range(len(adj)):
        augment(u, set())
    return match_right


def match_notes(pred: Sequence[NoteEvent], ref: Sequence[NoteEvent], tol: float = ONSET_TOLERANCE) -> MatchResult:
    """Match predicted to reference notes by pitch and onset within ``tol`` seconds.

    Offsets are ignored. Precision is matches / predictions, recall is
    matches / references; each is 0 when its denominator is 0.
    """
    if tol < 0:
        raise ValueError(f"tolerance must be non-negative, got {tol}")
    by_pitch: dict[int, list[int]] = {}
    for j, r in enumerate(ref):
        by_pitch.setdefault(r.pitch, []).append(j)
    adj = [[j for j in by_pitch.get(p.pitch, ()) if admissible(p, ref[j], tol)] for p in pred]
    match_right = max_bipartite_matching(adj, len(ref))
    pairs = sorted((i, j) for j, i in enumerate(match_right) if i != -1)
    precision = len(pairs) / len(pred) if pred else 0.0
    recall = len(pairs) / len(ref) if ref else 0.0
    return MatchResult(pairs, precision, recall, f1_score(precision, recall), tol)


@dataclass
class FileReport:
    name: str
    precision: float
    recall: float
    f1: float
    num_pred: int
    num_ref: int
    num_matches: int


@dataclass
class CorpusReport:
    files: list[FileReport] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    tolerance: float = ONSET_TOLERANCE

    @property
    def no_files(self) -> bool:
        return not self.files

    @property
    def mean_f1(self) -> float:
        if not self.files:
            return 0.0
        return sum(f.f1 for f in self.files) / len(self.files)

    @property
    def complete(self) -> bool:
        return not self.missing

    def records(self) -> list[dict]:
        recs = [{"type": "file", **asdict(f)} for f in self.files]
        recs += [{"type": "missing", "name": m} for m in self.missing]
        recs.append({
            "type": "summary",
            "num_files": len(self.files),
            "num_missing": len(self.missing),
            "no_files": self.no_files,
            "mean_f1": self.mean_f1,
            "tolerance": self.tolerance,
        })
        return recs

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    def table(self) -> str:
        lines = [f"{'file':<40} {'P':>6} {'R':>6} {'F1':>6}"]
        for f in self.files:
            lines.append(f"{f.name:<40} {f.precision:6.3f} {f.recall:6.3f} {f.f1:6.3f}")
        for m in self.missing:
            lines.append(f"{m:<40} {'missing counterpart':>20}")
        flag = "  (no files)" if self.no_files else ""
        lines.append(f"{'mean F1':<40} {'':>13} {self.mean_f1:6.3f}{flag}")
        return "\n".join(lines)


def _midi_files(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in MIDI_SUFFIXES}


def evaluate_corpus(pred_dir, ref_dir, tol: float = ONSET_TOLERANCE) -> CorpusReport:
    """Score every MIDI file in ``pred_dir`` against the same-stem file in ``ref_dir``.

    Files without a counterpart on either side are listed in ``missing`` and
    left out of the macro-averaged F1.
    """
    preds, refs = _midi_files(Path(pred_dir)), _midi_files(Path(ref_dir))
    report = CorpusReport(tolerance=tol)
    for name in sorted(set(preds) | set(refs)):
        if name not in preds or name not in refs:
            report.missing.append(name)
            continue
        p_notes, r_notes = midi_to_notes(preds[name]), midi_to_notes(refs[name])
        m = match_notes(p_notes, r_notes, tol)
        report.files.append(
            FileReport(name, m.precision, m.recall, m.f1, len(p_notes), len(r_notes), m.num_matches)
        )
    return report
