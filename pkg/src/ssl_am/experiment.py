"""End-to-end desk-scale experiments on a synthetic corpus.

One seed runs: feature extraction, a strong and a weak bidirectional
teacher on the labeled split, top-k target generation on the unlabeled
pool, and four unidirectional students evaluated on held-out frames:

* ``baseline``   labeled data only
* ``ssl_sl``     teacher targets interleaved with labeled passes (strong teacher)
* ``ssl_nosl``   teacher targets only, same unlabeled sub-epochs
* ``ssl_sl_weak`` like ``ssl_sl`` with the weak teacher's targets
"""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import pipeline as pl
from .data import evaluate
from .distopt import BmufConfig, GtcConfig, TrainData, WorkerPool, run_training
from .manifest import ManifestRow, read_manifest, write_manifest
from .nncore import ModelParams, ModelSpec
from .schedule import ScheduleConfig, TrainPlan, build_plan, build_supervised_plan, without_labeled
from .synth import SynthCorpus, SynthSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(
        utterances={"labeled": 30, "unlabeled": 1200, "heldout": 40}))
    teacher_layers: tuple = (64,)
    student_layers: tuple = (64,)
    lookahead: int = 3
    k: int = 20
    batch_size: int = 16
    teacher_epochs: int = 30
    teacher_full_epochs: int = 3
    weak_teacher_epochs: int = 4
    teacher_lr: float = 0.5
    teacher_gamma: float = 0.93
    baseline_epochs: int = 30
    baseline_full_epochs: int = 3
    baseline_lr: float = 0.5
    baseline_gamma: float = 0.93
    sub_epochs: int = 6
    interleave_every: int = 1
    chunked_until: int = 5
    student_lr: float = 0.5
    student_gamma: float = 0.85
    labeled_boost: float = 1.5
    workers: int = 1
    protocol: str = "gtc"
    tau: float = 0.0
    block_size: int = 4


def synth_rows(spec: SynthSpec, corpus_file: str = "corpus.json") -> list[ManifestRow]:
    """Manifest rows pointing at a corpus spec stored next to the manifest."""
    return [
        ManifestRow(i.utterance_id, i.speaker_id, i.timestamp, f"synth:{corpus_file}#{i.index}",
                    "-" if i.split == "unlabeled" else "synth", i.split, i.condition)
        for i in SynthCorpus(spec).infos
    ]


def synth_manifest(spec: SynthSpec, out_dir) -> Path:
    """Write ``corpus.json`` and ``manifest.tsv`` describing a synthetic corpus."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "corpus.json").write_text(spec.to_json())
    write_manifest(out_dir / "manifest.tsv", synth_rows(spec))
    return out_dir / "manifest.tsv"


def protocol_for(cfg: ExperimentConfig):
    if cfg.protocol == "bmuf":
        return BmufConfig(block_size=cfg.block_size)
    return GtcConfig(cfg.tau)


def train(spec: ModelSpec, plan: TrainPlan, data: TrainData, cfg: ExperimentConfig, seed: int):
    with WorkerPool(ModelParams.init(spec, seed), cfg.workers, seed=seed) as pool:
        return run_training(pool, plan, protocol_for(cfg), data, batch_size=cfg.batch_size, seed=seed)


@dataclass
class SeedResult:
    seed: int
    errors: dict[str, float]
    curves: dict[str, list[float]]
    seconds: float


def run_seed(cfg: ExperimentConfig, seed: int, work_dir=None) -> SeedResult:
    t0 = time.time()
    with tempfile.TemporaryDirectory() as tmp:
        manifest = read_manifest(synth_manifest(replace(cfg.synth, seed=seed), Path(work_dir or tmp)))
        feats, _, _ = pl.extract_all(manifest)
        labeled = pl.labeled_examples(manifest, feats)
        heldout = pl.labeled_examples(manifest, feats, "heldout", (0,))[0]
    classes = cfg.synth.num_classes
    dim = next(iter(feats.values())).frames.shape[1]
    teacher_spec = ModelSpec(dim, cfg.teacher_layers, classes, bidirectional=True)
    student_spec = ModelSpec(dim, cfg.student_layers, classes, lookahead_frames=cfg.lookahead)
    sup = TrainData(labeled, [], heldout)

    teachers = {}
    for name, epochs in (("strong", cfg.teacher_epochs), ("weak", cfg.weak_teacher_epochs)):
        full = cfg.teacher_full_epochs if name == "strong" else 0
        plan = build_supervised_plan(epochs, full, cfg.teacher_lr, cfg.teacher_gamma)
        teachers[name], _ = train(teacher_spec, plan, sup, cfg, seed)

    errors: dict[str, float] = {}
    curves: dict[str, list[float]] = {}
    for name, teacher in teachers.items():
        errors[f"teacher_{name}"] = evaluate(teacher, heldout).frame_error

    base_plan = build_supervised_plan(cfg.baseline_epochs, cfg.baseline_full_epochs, cfg.baseline_lr,
                                      cfg.baseline_gamma)
    model, met = train(student_spec, base_plan, sup, cfg, seed)
    errors["baseline"] = met[-1].heldout_frame_error
    curves["baseline"] = [m.heldout_frame_error for m in met]

    sl_plan = build_plan(ScheduleConfig(
        cfg.sub_epochs, cfg.interleave_every, cfg.student_lr, cfg.student_gamma, cfg.labeled_boost,
        cfg.chunked_until,
    ))
    unl_seqs = [feats[(r.utterance_id, 0)] for r in manifest.split("unlabeled")]
    arms = (("ssl_sl", "strong", sl_plan), ("ssl_nosl", "strong", without_labeled(sl_plan)),
            ("ssl_sl_weak", "weak", sl_plan))
    stores = {name: pl.targets_in_memory(t, unl_seqs, cfg.k) for name, t in teachers.items()}
    for arm, teacher_name, plan in arms:
        unl = pl.unlabeled_examples(manifest, feats, stores[teacher_name], num_outputs=classes)
        model, met = train(student_spec, plan, TrainData(labeled, unl, heldout), cfg, seed)
        errors[arm] = met[-1].heldout_frame_error
        curves[arm] = [m.heldout_frame_error for m in met]
    res = SeedResult(seed, errors, curves, time.time() - t0)
    log.info("seed %d: %s (%.0fs)", seed, {k: round(v, 4) for k, v in errors.items()}, res.seconds)
    return res
