"""Glue between manifests, features, target stores and training."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


from . import featpipe as fp
from .data import Example
from .errors import DataError
from .featpipe import FeatureSequence, NormStats
from .manifest import Manifest, ManifestRow, row_labels, row_logmel
from .nncore import ModelParams
from .targetstore import StoreWriter, TargetStore, generate_targets, soft_targets

log = logging.getLogger(__name__)

ALL_OFFSETS = (0, 1, 2)


def store_key(utterance_id: str, offset: int) -> str:
    return utterance_id if offset == 0 else f"{utterance_id}@{offset}"


# ---------------------------------------------------------------------------
# feature extraction


def _stacked(rows: Sequence[ManifestRow], base: Path, offsets) -> dict[tuple[str, int], FeatureSequence]:
    out = {}
    for r in rows:
        lm = row_logmel(r, base)
        for o in offsets:
            out[(r.utterance_id, o)] = fp.stack_subsample(
                lm, o, r.utterance_id, speaker_id=r.speaker_id, timestamp=r.timestamp)
    return out


def _speaker_streams(rows: Sequence[ManifestRow], offsets):
    """(speaker, offset) -> rows sorted by timestamp, in first-appearance order."""
    streams: dict[tuple[str, int], list[ManifestRow]] = {}
    for r in rows:
        for o in offsets:
            streams.setdefault((r.speaker_id, o), []).append(r)
    return {k: sorted(v, key=lambda r: (r.timestamp, r.utterance_id)) for k, v in streams.items()}


def _cmn(rows, stacked, prior: NormStats, prior_weight: float, offsets) -> dict[tuple[str, int], FeatureSequence]:
    out = {}
    for (_, o), stream_rows in _speaker_streams(rows, offsets).items():
        seqs = [stacked[(r.utterance_id, o)] for r in stream_rows]
        for seq in fp.causal_mean_subtract(seqs, prior, prior_weight):
            out[(seq.utterance_id, o)] = seq
    return out


def fit_stats(labeled: Sequence[ManifestRow], base: Path, prior_weight: float = fp.PRIOR_WEIGHT):
    """Global raw-feature mean (the causal-mean prior) and post-CMN MVN stats, from labeled rows."""
    if not labeled:
        raise DataError("normalization statistics need a non-empty labeled split")
    stacked = _stacked(labeled, base, ALL_OFFSETS)
    prior = fp.compute_global_stats(stacked[k] for k in sorted(stacked))
    normed = _cmn(labeled, stacked, prior, prior_weight, ALL_OFFSETS)
    mvn = fp.compute_global_stats(normed[k] for k in sorted(normed))
    return prior, mvn


def extract_shard(rows: Sequence[ManifestRow], base: Path, prior: NormStats, mvn: NormStats,
                  offsets=ALL_OFFSETS, prior_weight: float = fp.PRIOR_WEIGHT) -> list[FeatureSequence]:
    """Normalized features for one shard, in manifest order then offset order."""
    stacked = _stacked(rows, base, offsets)
    normed = _cmn(rows, stacked, prior, prior_weight, offsets)
    return [fp.apply_mvn(normed[(r.utterance_id, o)], mvn) for r in rows for o in offsets]


def shard_rows(rows: Sequence[ManifestRow], num_shards: int) -> list[list[ManifestRow]]:
    shards: list[list[ManifestRow]] = [[] for _ in range(num_shards)]
    for r in rows:
        shards[fp.shard_by_speaker(r.speaker_id, num_shards)].append(r)
    return shards


def extract_all(manifest: Manifest, offsets=ALL_OFFSETS, stats=None,
                prior_weight: float = fp.PRIOR_WEIGHT) -> tuple[dict[tuple[str, int], FeatureSequence], NormStats, NormStats]:
    """In-memory extraction of every row; returns (features, prior, mvn)."""
    if stats is None:
        stats = fit_stats(manifest.split("labeled"), manifest.base_dir, prior_weight)
    prior, mvn = stats
    seqs = extract_shard(manifest.rows, manifest.base_dir, prior, mvn, offsets, prior_weight)
    return {(s.utterance_id, s.offset): s for s in seqs}, prior, mvn


def load_features(paths: Iterable) -> dict[tuple[str, int], FeatureSequence]:
    out = {}
    for p in paths:
        for seq in fp.read_feature_file(p):
            key = (seq.utterance_id, seq.offset)
            if key in out:
                raise DataError(f"duplicate features for {key}")
            out[key] = seq
    return out


def feature_files(spec: Sequence[str]) -> list[Path]:
    files = []
    for item in spec:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(p.glob("*.dfft")))
        elif p.is_file():
            files.append(p)
        else:
            raise DataError(f"feature path {p} not found")
    if not files:
        raise DataError("no feature files found")
    return files


# ---------------------------------------------------------------------------
# examples


def labeled_examples(manifest: Manifest, feats, split: str = "labeled",
                     offsets=ALL_OFFSETS) -> dict[int, list[Example]]:
    rows = manifest.split(split)
    if not rows:
        raise DataError(f"split {split!r} is empty")
    out: dict[int, list[Example]] = defaultdict(list)
    for r in rows:
        labels = row_labels(r, manifest.base_dir)
        for o in offsets:
            seq = feats.get((r.utterance_id, o))
            if seq is None:
                raise DataError(f"no features for {r.utterance_id} at offset {o}")
            y = fp.stacked_labels(labels, o)
            if y.size != seq.num_frames:
                raise DataError(f"{r.utterance_id}@{o}: {y.size} labels for {seq.num_frames} frames")
            out[o].append(Example(r.utterance_id, seq.frames, y, r.condition))
    return dict(out)


def unlabeled_examples(manifest: Manifest, feats, store: TargetStore, offset: int = 0,
                       fill: float = -1e4, num_outputs: int | None = None) -> list[Example]:
    if num_outputs is not None and store.num_outputs != num_outputs:
        raise DataError(f"store has D={store.num_outputs}, model expects {num_outputs}")
    out = []
    for r in manifest.split("unlabeled"):
        seq = feats.get((r.utterance_id, offset))
        if seq is None:
            raise DataError(f"no features for {r.utterance_id} at offset {offset}")
        idx, val = store.read(store_key(r.utterance_id, offset))
        if idx.shape[0] != seq.num_frames:
            raise DataError(f"{r.utterance_id}: store has {idx.shape[0]} frames, features {seq.num_frames}")
        out.append(Example(r.utterance_id, seq.frames, soft_targets(idx, val, store.num_outputs, fill), r.condition))
    return out


def write_targets(path, teacher: ModelParams, seqs: Iterable[FeatureSequence], k: int) -> int:
    n = 0
    with StoreWriter(path, teacher.spec.num_outputs, min(k, teacher.spec.num_outputs)) as w:
        for seq in seqs:
            idx, val = generate_targets(teacher, seq.frames, k)
            w.write(store_key(seq.utterance_id, seq.offset), idx, val)
            n += 1
    return n


@dataclass
class InMemoryStore:
    """Dict-backed stand-in for :class:`TargetStore` used by in-process experiments."""

    num_outputs: int
    k: int
    records: dict

    def read(self, key):
        try:
            return self.records[key]
        except KeyError:
            raise DataError(f"utterance {key!r} not in store") from None


def targets_in_memory(teacher: ModelParams, seqs: Iterable[FeatureSequence], k: int) -> InMemoryStore:
    recs = {store_key(s.utterance_id, s.offset): generate_targets(teacher, s.frames, k) for s in seqs}
    return InMemoryStore(teacher.spec.num_outputs, min(k, teacher.spec.num_outputs), recs)
