"""Training examples, BPTT units, minibatching and held-out evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .nncore import ModelParams, _forward_batch, align_targets, ce_loss, chunk_bounds, loss_and_grad, scored_mask

DEFAULT_BATCH = 16


@dataclass(frozen=True)
class Example:
    """One utterance at one feature offset with unaligned per-frame targets.

    ``targets`` is ``(T,)`` int labels or ``(T, D)`` soft posteriors.
    ``condition`` tags the noise bucket for per-condition breakdowns.
    """

    uid: str
    frames: np.ndarray
    targets: np.ndarray
    condition: str = ""

    def __post_init__(self):
        if self.frames.shape[0] != self.targets.shape[0]:
            raise DataError(f"{self.uid}: {self.frames.shape[0]} frames but {self.targets.shape[0]} targets")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Unit:
    """A BPTT unit: a chunk or a whole sequence with look-ahead-aligned targets."""

    frames: np.ndarray
    targets: np.ndarray

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def scored(self) -> int:
        return int(scored_mask(self.targets).sum())


def make_units(examples: Sequence[Example], lookahead: int, chunk_len: int | None) -> list[Unit]:
    """Whole sequences (``chunk_len=None``) or consecutive chunks of each sequence."""
    units = []
    for ex in examples:
        aligned = align_targets(ex.targets, lookahead)
        if chunk_len is None:
            units.append(Unit(ex.frames, aligned))
            continue
        for s, e in chunk_bounds(ex.num_frames, chunk_len):
            units.append(Unit(ex.frames[s:e], aligned[s:e]))
    return units


def make_minibatches(units: Sequence[Unit], batch_size: int, rng: np.random.Generator) -> list[list[Unit]]:
    """Shuffle units, bucket by length, cut into minibatches and shuffle their order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(units))
    # stable sort by length keeps the random order within each length bucket
    order = sorted(order.tolist(), key=lambda i: -units[i].length)
    batches = [[units[i] for i in order[s : s + batch_size]] for s in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_scored(batch: Sequence[Unit]) -> int:
    return sum(u.scored for u in batch)


def _group_by_length(batch: Sequence[Unit]) -> list[list[Unit]]:
    groups: dict[int, list[Unit]] = {}
    for u in batch:
        groups.setdefault(u.length, []).append(u)
    return list(groups.values())


def minibatch_loss_grad(model: ModelParams, batch: Sequence[Unit], normalizer: float | None = None):
    """Mean CE over all scored frames of a minibatch and its gradient.

    Units of different lengths are run as separate equal-length sub-batches;
    their gradients are summed in first-appearance order.
    """
    if normalizer is None:
        normalizer = batch_scored(batch)
    total_loss = 0.0
    grad = None
    for group in _group_by_length(batch):
        x = np.stack([u.frames for u in group])
        t = np.stack([u.targets for u in group])
        loss, g = loss_and_grad(model, x, t, normalizer)
        total_loss += loss
        grad = g if grad is None else grad + g
    if grad is None:
        grad = np.zeros_like(model.params)
    return total_loss, grad


@dataclass(frozen=True)
class EvalResult:
    ce: float
    frame_error: float
    frames: int
    errors: int
    by_condition: dict[str, tuple[int, int]]  # condition -> (errors, frames)


def evaluate(model: ModelParams, examples: Sequence[Example], batch_size: int = 32) -> EvalResult:
    """Frame error and CE against hard labels, with the model's look-ahead alignment."""
    if not examples:
        raise DataError("nothing to evaluate")
    lookahead = model.spec.lookahead_frames
    by_len: dict[int, list[Example]] = {}
    for ex in examples:
        if ex.targets.dtype.kind not in "iu":
            raise DataError(f"{ex.uid}: evaluation needs hard labels")
        by_len.setdefault(ex.num_frames, []).append(ex)
    ce_sum = 0.0
    frames = errors = 0
    by_cond: dict[str, list[int]] = {}
    for length in sorted(by_len):
        group = by_len[length]
        for s in range(0, len(group), batch_size):
            part = group[s : s + batch_size]
            x = np.stack([e.frames for e in part]).astype(model.dtype, copy=False)
            t = np.stack([align_targets(e.targets, lookahead) for e in part])
            logits, _ = _forward_batch(model, x)
            mask = t >= 0
            n = int(mask.sum())
            if n == 0:
                continue
            loss, _ = ce_loss(logits, t, n)
            ce_sum += loss * n
            wrong = (logits.argmax(-1) != t) & mask
            frames += n
            errors += int(wrong.sum())
            for e, w, m in zip(part, wrong, mask):
                slot = by_cond.setdefault(e.condition, [0, 0])
                slot[0] += int(w.sum())
                slot[1] += int(m.sum())
    if frames == 0:
        raise DataError("no scored frames to evaluate")
    return EvalResult(ce_sum / frames, errors / frames, frames, errors,
                      {k: (v[0], v[1]) for k, v in sorted(by_cond.items())})
