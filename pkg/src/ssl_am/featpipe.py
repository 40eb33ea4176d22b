"""Feature frontend: log-mel energies, 3x stacking with offsets, causal mean
normalization per speaker stream, global MVN, and speaker-hash sharding."""

from __future__ import annotations

import io
import logging
import struct
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, StoreFormatError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WIN_LEN = 400  # 25 ms
HOP_LEN = 160  # 10 ms
N_FFT = 512
MEL_BINS = 64
STACK = 3
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8
PRIOR_WEIGHT = 100.0

FEATURE_MAGIC = b"DFFT"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    timestamp: float
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.utterance_id or not self.speaker_id:
            raise DataError("utterance and speaker ids must be non-empty")
        if len(self.samples) < WIN_LEN:
            raise DataError(f"{self.utterance_id}: shorter than one analysis window")


@dataclass(frozen=True)
class FeatureSequence:
    utterance_id: str
    offset: int
    frames: np.ndarray = field(repr=False)
    normalized: bool = False
    speaker_id: str = ""
    timestamp: float = 0.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int

    def __post_init__(self):
        if self.frame_count <= 0:
            raise DataError("NormStats needs at least one frame")
        if np.any(self.variance <= 0):
            raise DataError("NormStats variance must be positive")


# ---------------------------------------------------------------------------
# log-mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = MEL_BINS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0, fmax: float | None = None,
) -> np.ndarray:
    """HTK-style triangular filters, ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


_FBANK_CACHE: dict[tuple, np.ndarray] = {}


def frame_signal(samples: np.ndarray, win: int = WIN_LEN, hop: int = HOP_LEN) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise DataError("expected mono audio")
    if samples.size < win:
        raise DataError(f"audio has {samples.size} samples, shorter than one {win}-sample window")
    n = (samples.size - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n]


def logmel(samples: np.ndarray, n_mels: int = MEL_BINS, eps: float = LOG_FLOOR) -> np.ndarray:
    """``(T, n_mels)`` natural-log mel energies, 25 ms Hann window every 10 ms."""
    frames = frame_signal(samples)
    key = (n_mels,)
    if key not in _FBANK_CACHE:
        _FBANK_CACHE[key] = mel_filterbank(n_mels)
    fbank = _FBANK_CACHE[key]
    spec = np.abs(np.fft.rfft(frames * np.hanning(WIN_LEN), n=N_FFT, axis=1)) ** 2
    return np.log(np.maximum(spec @ fbank.T, eps))


# ---------------------------------------------------------------------------
# stacking


def stack_subsample(logmel_frames: np.ndarray, offset: int, utterance_id: str = "",
                    stack: int = STACK, **meta) -> FeatureSequence:
    """Row j = concat(rows stack*j+offset .. stack*j+offset+stack-1); remainder dropped."""
    if not 0 <= offset < stack:
        raise ValueError(f"offset {offset} outside [0, {stack})")
    x = np.asarray(logmel_frames)
    n = max((x.shape[0] - offset) // stack, 0)
    rows = x[offset : offset + n * stack].reshape(n, stack * x.shape[1])
    return FeatureSequence(utterance_id, offset, rows.astype(np.float32), False, **meta)


def stacked_labels(frame_labels: np.ndarray, offset: int, stack: int = STACK) -> np.ndarray:
    """Label of each stacked frame: the label of its middle 10 ms row."""
    labels = np.asarray(frame_labels)
    n = max((labels.size - offset) // stack, 0)
    return labels[offset + stack // 2 : offset + n * stack : stack][:n]


# ---------------------------------------------------------------------------
# normalization


def causal_mean_subtract(
    stream: Sequence[FeatureSequence], prior: NormStats, prior_weight: float = PRIOR_WEIGHT,
) -> list[FeatureSequence]:
    """Subtract a running past-only mean over one speaker's time-ordered stream.

    The running mean starts from ``prior.mean`` weighted as ``prior_weight``
    frames and excludes the current frame. An infinite weight freezes the
    mean at the prior.
    """
    stamps = [s.timestamp for s in stream]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise DataError("speaker stream is not sorted by timestamp")
    mean = np.asarray(prior.mean, dtype=np.float64)
    out = []
    if np.isinf(prior_weight):
        for seq in stream:
            out.append(replace(seq, frames=(seq.frames - mean).astype(np.float32)))
        return out
    run_sum = mean * prior_weight
    run_count = float(prior_weight)
    for seq in stream:
        x = np.asarray(seq.frames, dtype=np.float64)
        before = np.cumsum(x, axis=0) - x
        counts = run_count + np.arange(x.shape[0], dtype=np.float64)
        running = (run_sum + before) / counts[:, None]
        out.append(replace(seq, frames=(x - running).astype(np.float32)))
        if x.shape[0]:
            run_sum = run_sum + x.sum(axis=0)
            run_count += x.shape[0]
    return out


class StatsAccumulator:
    """Mergeable (count, sum, sum of squares) triple in float64."""

    def __init__(self, dim: int):
        self.count = 0
        self.total = np.zeros(dim)
        self.total_sq = np.zeros(dim)

    def add(self, frames: np.ndarray) -> "StatsAccumulator":
        x = np.asarray(frames, dtype=np.float64)
        self.count += x.shape[0]
        self.total += x.sum(axis=0)
        self.total_sq += (x * x).sum(axis=0)
        return self

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        self.count += other.count
        self.total += other.total
        self.total_sq += other.total_sq
        return self

    def finalize(self, var_floor: float = VAR_FLOOR) -> NormStats:
        if self.count == 0:
            raise DataError("cannot compute statistics of an empty corpus")
        mean = self.total / self.count
        var = self.total_sq / self.count - mean * mean
        low = var < var_floor
        if low.any():
            log.warning("variance floored at %g in %d dimension(s)", var_floor, int(low.sum()))
            var = np.where(low, var_floor, var)
        return NormStats(mean, var, self.count)


def compute_global_stats(corpus: Iterable[FeatureSequence], var_floor: float = VAR_FLOOR) -> NormStats:
    acc = None
    for seq in corpus:
        if acc is None:
            acc = StatsAccumulator(seq.frames.shape[1])
        acc.add(seq.frames)
    if acc is None:
        raise DataError("cannot compute statistics of an empty corpus")
    return acc.finalize(var_floor)


def apply_mvn(seq: FeatureSequence, stats: NormStats) -> FeatureSequence:
    scaled = (np.asarray(seq.frames, dtype=np.float64) - stats.mean) / np.sqrt(stats.variance)
    return replace(seq, frames=scaled.astype(np.float32), normalized=True)


def save_stats(path, cmn_prior: NormStats, mvn: NormStats) -> None:
    """Write an ``.npz`` archive with fixed entry timestamps so reruns are byte-identical."""
    arrays = {
        "prior_mean": cmn_prior.mean, "prior_var": cmn_prior.variance,
        "prior_count": np.int64(cmn_prior.frame_count),
        "mvn_mean": mvn.mean, "mvn_var": mvn.variance, "mvn_count": np.int64(mvn.frame_count),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_stats(path) -> tuple[NormStats, NormStats]:
    with np.load(path) as z:
        prior = NormStats(z["prior_mean"], z["prior_var"], int(z["prior_count"]))
        mvn = NormStats(z["mvn_mean"], z["mvn_var"], int(z["mvn_count"]))
    return prior, mvn


# ---------------------------------------------------------------------------
# sharding

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def shard_by_speaker(speaker_id: str, num_shards: int) -> int:
    if num_shards < 1:
        raise ValueError("num_shards must be >= 1")
    return fnv1a64(speaker_id.encode("utf-8")) % num_shards


# ---------------------------------------------------------------------------
# feature shard files


def write_feature_file(path, sequences: Iterable[FeatureSequence], mel_bins: int = MEL_BINS,
                       stack: int = STACK) -> int:
    """Write one shard; returns the number of records."""
    dim = mel_bins * stack
    n = 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<HHB", FEATURE_VERSION, mel_bins, stack))
        for seq in sequences:
            frames = np.asarray(seq.frames)
            if frames.ndim != 2 or frames.shape[1] != dim:
                raise DataError(f"{seq.utterance_id}: frame dim {frames.shape} != {dim}")
            uid = seq.utterance_id.encode("utf-8")
            fh.write(struct.pack("<H", len(uid)) + uid)
            fh.write(struct.pack("<BI", seq.offset, frames.shape[0]))
            fh.write(frames.astype("<f4").tobytes())
            n += 1
    return n


def read_feature_file(path) -> Iterator[FeatureSequence]:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise StoreFormatError(f"{path}: not a feature file (bad magic)")
    if len(data) < 9:
        raise StoreFormatError(f"{path}: truncated header")
    version, mel_bins, stack = struct.unpack_from("<HHB", data, 4)
    if version != FEATURE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    dim = mel_bins * stack
    pos = 9
    while pos < len(data):
        try:
            (idlen,) = struct.unpack_from("<H", data, pos)
            uid = data[pos + 2 : pos + 2 + idlen].decode("utf-8")
            pos += 2 + idlen
            offset, nframes = struct.unpack_from("<BI", data, pos)
            pos += 5
        except struct.error as exc:
            raise StoreFormatError(f"{path}: truncated record") from exc
        nbytes = nframes * dim * 4
        if pos + nbytes > len(data):
            raise StoreFormatError(f"{path}: truncated record for {uid}")
        frames = np.frombuffer(data, dtype="<f4", count=nframes * dim, offset=pos).reshape(nframes, dim)
        pos += nbytes
        yield FeatureSequence(uid, offset, frames.astype(np.float32), True)
