"""Tab-separated utterance manifests and the sources they point at.

Columns: utterance_id, speaker_id, timestamp, source, labels, split, condition.

``source`` is a ``.wav`` (16 kHz mono PCM16) or ``.npy`` sample file, or
``synth:<corpus.json>#<index>``. ``labels`` is a ``.npy`` file of per-10 ms
frame labels, ``synth`` to regenerate them, or ``-``. Relative paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
import wave
from dataclasses import astuple, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError
from .featpipe import SAMPLE_RATE, logmel
from .synth import SPLITS, SynthCorpus, load_spec

COLUMNS = ("utterance_id", "speaker_id", "timestamp", "source", "labels", "split", "condition")
NO_LABELS = "-"


@dataclass(frozen=True)
class ManifestRow:
    utterance_id: str
    speaker_id: str
    timestamp: float
    source: str
    labels: str
    split: str
    condition: str = ""

    @property
    def has_labels(self) -> bool:
        return self.labels not in ("", NO_LABELS)


@dataclass(frozen=True)
class Manifest:
    rows: tuple[ManifestRow, ...]
    base_dir: Path

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def by_id(self) -> dict[str, ManifestRow]:
        return {r.utterance_id: r for r in self.rows}


def validate_rows(rows) -> None:
    seen = set()
    for r in rows:
        if not r.utterance_id or not r.speaker_id:
            raise DataError("manifest row with empty utterance or speaker id")
        if r.utterance_id in seen:
            raise DataError(f"duplicate utterance id {r.utterance_id!r}")
        seen.add(r.utterance_id)
        if r.split not in SPLITS:
            raise DataError(f"{r.utterance_id}: unknown split {r.split!r}")
        if r.split in ("labeled", "heldout") and not r.has_labels:
            raise DataError(f"{r.utterance_id}: {r.split} rows need frame labels")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header[: len(COLUMNS) - 1]) != COLUMNS[:-1]:
            raise DataError(f"{path}: missing or wrong header line; expected {' '.join(COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) < 6:
                raise DataError(f"{path}:{lineno}: expected at least 6 columns")
            try:
                ts = float(rec[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad timestamp {rec[2]!r}") from exc
            rows.append(ManifestRow(rec[0], rec[1], ts, rec[3], rec[4], rec[5], rec[6] if len(rec) > 6 else ""))
    validate_rows(rows)
    return Manifest(tuple(rows), path.parent)


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            vals = list(astuple(r))
            vals[2] = repr(float(vals[2]))
            w.writerow(vals)


@lru_cache(maxsize=8)
def _corpus(spec_path: str) -> SynthCorpus:
    return SynthCorpus(load_spec(spec_path))


def _synth_ref(source: str, base: Path):
    ref = source[len("synth:"):]
    spec_file, _, idx = ref.rpartition("#")
    if not spec_file or not idx.isdigit():
        raise DataError(f"bad synthetic source {source!r}")
    spec_path = (base / spec_file).resolve()
    if not spec_path.is_file():
        raise DataError(f"synthetic corpus spec {spec_path} not found")
    corpus = _corpus(str(spec_path))
    index = int(idx)
    if index >= len(corpus.infos):
        raise DataError(f"synthetic index {index} out of range")
    return corpus, corpus.infos[index]


def read_wav(path) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getframerate() != SAMPLE_RATE or w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16 kHz mono 16-bit PCM")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


def row_logmel(row: ManifestRow, base: Path) -> np.ndarray:
    """Log-mel frames for a row, computing them from audio when needed."""
    if row.source.startswith("synth:"):
        corpus, info = _synth_ref(row.source, base)
        utt = corpus.generate(info)
        return utt.logmel if utt.logmel is not None else logmel(utt.samples)
    path = base / row.source
    if not path.is_file():
        raise DataError(f"{row.utterance_id}: audio {path} not found")
    if path.suffix == ".wav":
        return logmel(read_wav(path))
    if path.suffix == ".npy":
        return logmel(np.load(path))
    raise DataError(f"{row.utterance_id}: unsupported audio format {path.suffix}")


def row_labels(row: ManifestRow, base: Path) -> np.ndarray:
    if not row.has_labels:
        raise DataError(f"{row.utterance_id}: no labels")
    if row.labels == "synth":
        if not row.source.startswith("synth:"):
            raise DataError(f"{row.utterance_id}: 'synth' labels need a synthetic source")
        corpus, info = _synth_ref(row.source, base)
        return corpus.frame_labels(info)
    path = base / row.labels
    if not path.is_file():
        raise DataError(f"{row.utterance_id}: labels {path} not found")
    return np.load(path).astype(np.int64)
