"""Synthetic senone-classification corpus.

A Markov chain over ``num_classes`` hidden states drives a three-formant
tone generator. Each state has its own formant frequencies and amplitudes,
taken from a coarse grid so that neighbouring states share formants and
need temporal context to be told apart. Speakers warp the formant
frequencies and apply a channel gain and tilt; every utterance gets white
noise at one of the configured SNRs, which doubles as its condition tag.

Utterances are regenerated on demand from ``(seed, index)``, so a corpus is
fully described by its :class:`SynthSpec`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .featpipe import HOP_LEN, MEL_BINS, SAMPLE_RATE, WIN_LEN

SPLITS = ("labeled", "unlabeled", "heldout")

F1_GRID = (300.0, 450.0, 600.0, 750.0, 900.0)
F2_GRID = (1100.0, 1400.0, 1700.0, 2000.0, 2300.0)
F3_GRID = (2700.0, 3200.0, 3700.0)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    num_classes: int = 30
    successors: int = 3
    min_dwell: int = 3  # in 10 ms frames
    max_dwell: int = 12
    speakers: dict = field(default_factory=lambda: {"labeled": 20, "unlabeled": 100, "heldout": 10})
    utterances: dict = field(default_factory=lambda: {"labeled": 40, "unlabeled": 800, "heldout": 40})
    durations_s: tuple = (1.5, 2.0, 2.5)
    snr_db: tuple = (0.0, 5.0, 10.0, 20.0)
    snr_weights: tuple | None = None
    warp_range: float = 0.08
    mode: str = "audio"  # or "features": skip audio, emit log-mel-like frames directly

    def __post_init__(self):
        object.__setattr__(self, "durations_s", tuple(self.durations_s))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        if self.snr_weights is not None:
            object.__setattr__(self, "snr_weights", tuple(self.snr_weights))
        if self.num_classes > len(F1_GRID) * len(F2_GRID) * len(F3_GRID):
            raise ValueError("too many classes for the formant grid")
        if not 1 <= self.min_dwell <= self.max_dwell:
            raise ValueError("need 1 <= min_dwell <= max_dwell")
        if self.mode not in ("audio", "features"):
            raise ValueError(f"unknown synth mode {self.mode!r}")
        for split in SPLITS:
            if self.utterances.get(split, 0) and self.speakers.get(split, 0) < 1:
                raise ValueError(f"split {split} has utterances but no speakers")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        raw = json.loads(text)
        for key in ("durations_s", "snr_db", "snr_weights"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass(frozen=True)
class UttInfo:
    index: int
    utterance_id: str
    speaker_id: str
    timestamp: float
    split: str
    condition: str
    duration_s: float


@dataclass(frozen=True)
class SynthUtterance:
    info: UttInfo
    samples: np.ndarray | None  # audio mode
    logmel: np.ndarray | None  # feature mode
    frame_labels: np.ndarray  # per 10 ms analysis frame


def num_analysis_frames(num_samples: int) -> int:
    return (num_samples - WIN_LEN) // HOP_LEN + 1


class SynthCorpus:
    def __init__(self, spec: SynthSpec):
        self.spec = spec

    @cached_property
    def _classes(self):
        rng = np.random.default_rng([self.spec.seed, 1])
        grid = np.array([(a, b, c) for a in F1_GRID for b in F2_GRID for c in F3_GRID])
        pick = rng.choice(len(grid), self.spec.num_classes, replace=False)
        freqs = grid[pick]
        amps = rng.uniform(0.3, 1.0, size=(self.spec.num_classes, 3))
        c = self.spec.num_classes
        succ = np.array([rng.choice(np.delete(np.arange(c), i), self.spec.successors, replace=False)
                         for i in range(c)])
        succ_p = rng.dirichlet(np.full(self.spec.successors, 2.0), size=c)
        templates = rng.normal(0.0, 1.5, size=(c, MEL_BINS))
        return freqs, amps, succ, succ_p, templates

    def _speaker(self, split: str, k: int):
        rng = np.random.default_rng([self.spec.seed, 2, SPLITS.index(split), k])
        warp = 1.0 + rng.uniform(-self.spec.warp_range, self.spec.warp_range)
        gain_db = rng.uniform(-12.0, 12.0)
        tilt = rng.uniform(-0.4, 0.4)
        return warp, gain_db, tilt

    @cached_property
    def infos(self) -> list[UttInfo]:
        out = []
        idx = 0
        for split in SPLITS:
            n = self.spec.utterances.get(split, 0)
            nspk = self.spec.speakers.get(split, 0)
            rng = np.random.default_rng([self.spec.seed, 3, SPLITS.index(split)])
            clock = np.zeros(max(nspk, 1))
            weights = None
            if self.spec.snr_weights is not None:
                weights = np.asarray(self.spec.snr_weights, dtype=float)
                weights = weights / weights.sum()
            for j in range(n):
                spk = j % nspk
                dur = float(rng.choice(self.spec.durations_s))
                snr = float(rng.choice(self.spec.snr_db, p=weights))
                clock[spk] += dur + float(rng.uniform(1.0, 60.0))
                out.append(UttInfo(
                    idx, f"{split[0]}{j:05d}", f"{split}-spk{spk:03d}", round(float(clock[spk]), 3),
                    split, f"snr{snr:g}", dur,
                ))
                idx += 1
        return out

    def by_split(self, split: str) -> list[UttInfo]:
        return [i for i in self.infos if i.split == split]

    def _state_path(self, rng, n_frames: int) -> np.ndarray:
        _, _, succ, succ_p, _ = self._classes
        labels = np.empty(n_frames, dtype=np.int64)
        state = int(rng.integers(self.spec.num_classes))
        pos = 0
        while pos < n_frames:
            dwell = int(rng.integers(self.spec.min_dwell, self.spec.max_dwell + 1))
            labels[pos : pos + dwell] = state
            pos += dwell
            state = int(succ[state][rng.choice(self.spec.successors, p=succ_p[state])])
        return labels

    def _hops(self, info: UttInfo):
        rng = np.random.default_rng([self.spec.seed, 4, info.index])
        n_samples = int(round(info.duration_s * SAMPLE_RATE))
        n_frames = num_analysis_frames(n_samples)
        # hop-level states; analysis frame i is centred in hop i + 1
        hops = self._state_path(rng, n_frames + 2)
        return rng, hops, n_samples, n_frames

    def frame_labels(self, info: UttInfo) -> np.ndarray:
        _, hops, _, n_frames = self._hops(info)
        return hops[1 : n_frames + 1].copy()

    def generate(self, info: UttInfo) -> SynthUtterance:
        spec = self.spec
        freqs, amps, _, _, templates = self._classes
        spk = int(info.speaker_id.rsplit("spk", 1)[1])
        warp, gain_db, tilt = self._speaker(info.split, spk)
        snr = float(info.condition[3:])
        rng, hops, n_samples, n_frames = self._hops(info)
        frame_labels = hops[1 : n_frames + 1].copy()
        if spec.mode == "features":
            base = templates[frame_labels] + gain_db / 4.0 + tilt * np.linspace(-1, 1, MEL_BINS)
            noise_scale = 0.5 + 4.0 / (1.0 + np.exp((snr - 5.0) / 4.0))
            frames = base + rng.normal(0.0, noise_scale, size=base.shape)
            return SynthUtterance(info, None, frames, frame_labels)
        sample_state = np.repeat(hops, HOP_LEN)[:n_samples]
        f = freqs[sample_state] * warp  # (N, 3)
        a = amps[sample_state] * (f / 1000.0) ** tilt
        a = a * np.exp(rng.normal(0.0, 0.1, size=(1, 3)))
        phase = 2 * np.pi * np.cumsum(f, axis=0) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi, size=3)
        clean = (a * np.sin(phase)).sum(axis=1) * 10.0 ** (gain_db / 20.0)
        power = float(np.mean(clean**2))
        noise = rng.normal(0.0, np.sqrt(power / 10.0 ** (snr / 10.0)), size=n_samples)
        return SynthUtterance(info, clean + noise, None, frame_labels)


def load_spec(path) -> SynthSpec:
    return SynthSpec.from_json(Path(path).read_text())
