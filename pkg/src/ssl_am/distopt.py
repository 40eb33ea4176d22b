"""Simulated data-parallel training: gradient threshold compression (GTC)
and blockwise model-update filtering (BMUF) over a deterministic worker pool.

Workers are either run round-robin in the calling thread (the reference
mode) or on a thread pool. Either way every exchange happens after all
workers have finished their local work and reductions run in worker-index
order, so both modes give bit-identical results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Example, EvalResult, Unit, batch_scored, evaluate, make_minibatches, make_units, minibatch_loss_grad
from .errors import DataError, SslError
from .nncore import ModelParams, check_finite, sgd_step
from .schedule import CHUNKED, LABELED, UNLABELED, Phase, TrainPlan, relative_error_reduction

log = logging.getLogger(__name__)

DEFAULT_TAU = 2.0**-10


class ReplicaDivergence(SslError):
    pass


class WorkerPool:
    """N model replicas, each with its own seeded RNG."""

    def __init__(self, model: ModelParams, num_workers: int, seed: int = 0, threaded: bool = False,
                 check_replicas: bool = False):
        if num_workers < 1:
            raise ValueError("need at least one worker")
        self.num_workers = num_workers
        self.replicas = [model] * num_workers
        self.rngs = [np.random.default_rng([seed, w]) for w in range(num_workers)]
        self.threaded = threaded
        self.check_replicas = check_replicas
        self._executor = ThreadPoolExecutor(num_workers) if threaded and num_workers > 1 else None

    @property
    def model(self) -> ModelParams:
        return self.replicas[0]

    def broadcast(self, model: ModelParams) -> None:
        self.replicas = [model] * self.num_workers

    def map(self, fn: Callable, items: Sequence) -> list:
        """Run ``fn(worker_index, item)`` per worker; results in worker order."""
        if self._executor is None:
            return [fn(w, item) for w, item in enumerate(items)]
        futures = [self._executor.submit(fn, w, item) for w, item in enumerate(items)]
        return [f.result() for f in futures]

    def assert_consistent(self) -> None:
        ref = self.replicas[0].params.tobytes()
        for w, rep in enumerate(self.replicas[1:], 1):
            if rep.params.tobytes() != ref:
                raise ReplicaDivergence(f"worker {w} replica differs from worker 0")

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# GTC


@dataclass
class GtcState:
    residual: np.ndarray
    tau: float

    @classmethod
    def fresh(cls, size: int, tau: float) -> "GtcState":
        if tau < 0:
            raise ValueError("tau must be >= 0")
        return cls(np.zeros(size, dtype=np.float64), tau)


def gtc_quantize(acc: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Split accumulated gradient into whole +-tau quanta and a residual.

    Each element sends ``q * tau`` with ``q = trunc(acc / tau)``, i.e. |q|
    messages of +-tau, and keeps ``acc - q * tau`` with magnitude < tau.
    ``tau == 0`` sends ``acc`` unchanged.
    """
    acc = np.asarray(acc, dtype=np.float64)
    if tau == 0:
        return acc.copy(), np.zeros_like(acc)
    quanta = np.trunc(acc / tau)
    residual = acc - quanta * tau
    # acc / tau can round across an integer; nudge those elements back in range
    bad = np.abs(residual) >= tau
    while bad.any():
        quanta[bad] += np.sign(residual[bad])
        residual = acc - quanta * tau
        bad = np.abs(residual) >= tau
    return quanta * tau, residual


@dataclass
class GtcRoundStats:
    sent: list[np.ndarray]  # per worker, float64
    residuals: list[np.ndarray]
    raw: list[np.ndarray]
    loss: float


def gtc_exchange(grads: Sequence[np.ndarray], states: Sequence[GtcState]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Quantize each worker's gradient+residual; returns (summed messages, per-worker messages)."""
    sent = []
    total = None
    for g, st in zip(grads, states):
        msg, st.residual = gtc_quantize(np.asarray(g, dtype=np.float64) + st.residual, st.tau)
        check_finite(st.residual, "GTC residual")
        sent.append(msg)
        total = msg.copy() if total is None else total + msg
    return total, sent


def gtc_round(pool: WorkerPool, states: Sequence[GtcState], minibatches: Sequence[Sequence[Unit] | None],
              lr: float, normalizer: float | None = None) -> GtcRoundStats:
    """One synchronous round: every worker computes a gradient on its minibatch,
    exchanges quantized updates, and applies the same summed update.

    ``normalizer`` defaults to the scored frames of all minibatches in the
    round, so with tau = 0 the summed update is the gradient of the mean loss
    over the concatenated batch. A ``None`` minibatch contributes a zero
    gradient (its residual still carries over).
    """
    if len(minibatches) != pool.num_workers:
        raise ValueError("need one (possibly empty) minibatch per worker")
    if pool.check_replicas:
        pool.assert_consistent()
    if normalizer is None:
        normalizer = sum(batch_scored(mb) for mb in minibatches if mb)

    def work(w, mb):
        if not mb or normalizer == 0:
            return 0.0, np.zeros(pool.replicas[w].params.size, dtype=pool.replicas[w].dtype)
        return minibatch_loss_grad(pool.replicas[w], mb, normalizer)

    results = pool.map(work, minibatches)
    grads = [g for _, g in results]
    raw = [np.asarray(g, dtype=np.float64) for g in grads]
    total, sent = gtc_exchange(grads, states)
    model = pool.model
    updated = model.params - (lr * total).astype(model.dtype)
    check_finite(updated, "GTC update")
    pool.broadcast(model.with_params(updated))
    return GtcRoundStats(sent, [st.residual.copy() for st in states], raw, sum(l for l, _ in results))


# ---------------------------------------------------------------------------
# BMUF


@dataclass
class BmufState:
    block_momentum: float
    block_lr: float = 1.0
    block_size: int = 1
    nesterov: bool = True
    delta: np.ndarray | None = None
    global_params: np.ndarray | None = None  # W: the filtered model, not the broadcast start

    def __post_init__(self):
        if not 0 <= self.block_momentum < 1:
            raise ValueError("block momentum must lie in [0, 1)")
        if not self.block_lr > 0:
            raise ValueError("block lr must be positive")
        if self.block_size < 1:
            raise ValueError("block size must be >= 1")


def bmuf_update(state: BmufState, w_start: np.ndarray, w_avg: np.ndarray) -> np.ndarray:
    """Apply one block-level filter step; returns the next broadcast start.

    With G = w_avg - w_start:  delta <- eta * delta + zeta * G,
    W <- W_prev + delta, next start = W + eta * delta (Nesterov) or W.

    ``w_start`` must be the start returned by the previous call (or the
    initial model). Then W_prev + eta * delta_prev is ``w_start`` under
    Nesterov and W_prev is ``w_start`` otherwise, so W is formed as
    zeta * w_avg + (1 - zeta) * w_start (+ eta * delta_prev without
    Nesterov). This reduces to ``w_avg`` bit-exactly when zeta = 1, eta = 0.
    """
    eta, zeta = state.block_momentum, state.block_lr
    delta_prev = np.zeros_like(w_start) if state.delta is None else state.delta
    g = w_avg - w_start
    delta = zeta * g if eta == 0 else eta * delta_prev + zeta * g
    w_new = w_avg.copy() if zeta == 1 else zeta * w_avg + (1 - zeta) * w_start
    if eta != 0 and not state.nesterov:
        w_new = w_new + eta * delta_prev
    check_finite(delta, "BMUF block delta")
    check_finite(w_new, "BMUF global model")
    state.delta = delta.astype(w_start.dtype, copy=False)
    state.global_params = w_new.astype(w_start.dtype, copy=False)
    if state.nesterov and eta != 0:
        return (state.global_params + eta * state.delta).astype(w_start.dtype, copy=False)
    return state.global_params


def local_sgd(model: ModelParams, minibatches: Sequence[Sequence[Unit]], lr: float) -> tuple[ModelParams, float]:
    loss = 0.0
    for mb in minibatches:
        l, g = minibatch_loss_grad(model, mb)
        model = sgd_step(model, g, lr)
        loss += l
    return model, loss


def bmuf_block(pool: WorkerPool, state: BmufState, blocks: Sequence[Sequence[Sequence[Unit]]],
               lr: float) -> ModelParams:
    """Each worker runs local SGD over its minibatches for this block from the
    broadcast start; the averaged displacement is filtered through the block
    momentum. Returns the global (filtered) model."""
    if len(blocks) != pool.num_workers:
        raise ValueError("need one block of minibatches per worker")
    if pool.check_replicas:
        pool.assert_consistent()
    start = pool.model
    ends = pool.map(lambda w, mbs: local_sgd(pool.replicas[w], mbs, lr)[0], blocks)
    acc = ends[0].params.astype(start.dtype, copy=True)
    for m in ends[1:]:
        acc += m.params
    w_avg = acc / pool.num_workers if pool.num_workers > 1 else acc
    nxt = bmuf_update(state, start.params, w_avg)
    pool.broadcast(start.with_params(nxt))
    return start.with_params(state.global_params)


# ---------------------------------------------------------------------------
# schedule driver


@dataclass(frozen=True)
class GtcConfig:
    tau: float = DEFAULT_TAU
    name = "gtc"


@dataclass(frozen=True)
class BmufConfig:
    block_size: int = 4
    block_momentum: float | None = None  # default 1 - 1/N
    block_lr: float = 1.0
    nesterov: bool = True
    name = "bmuf"


@dataclass
class TrainData:
    labeled: dict[int, list[Example]] = field(default_factory=dict)  # offset -> hard-label examples
    unlabeled: list[Example] = field(default_factory=list)  # soft-target examples, in pool order
    heldout: list[Example] = field(default_factory=list)


@dataclass(frozen=True)
class SubEpochMetrics:
    sub_epoch: int
    frames_seen: int
    heldout_ce: float
    heldout_frame_error: float
    relative_error_reduction: float | None


def _unlabeled_slices(plan: TrainPlan, pool_data: Sequence[Example]) -> list[list[Example]]:
    phases = [p for p in plan.phases if p.kind == UNLABELED]
    if not phases:
        return []
    if not pool_data:
        raise DataError("plan has unlabeled phases but the unlabeled pool is empty")
    if all(p.budget == 0 for p in phases):
        bounds = np.linspace(0, len(pool_data), len(phases) + 1).round().astype(int)
        return [list(pool_data[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    out = []
    pos = 0
    for p in phases:
        take = []
        frames = 0
        while pos < len(pool_data) and (frames < p.budget or p.budget == 0 and not take):
            take.append(pool_data[pos])
            frames += pool_data[pos].num_frames
            pos += 1
        if not take:
            raise DataError(f"unlabeled pool exhausted before sub-epoch {p.sub_epoch}")
        out.append(take)
    return out


def _phase_batches(phase: Phase, examples: Sequence[Example], lookahead: int, batch_size: int,
                   rng: np.random.Generator) -> list[list[Unit]]:
    chunk = phase.chunk_len if phase.bptt == CHUNKED else None
    return make_minibatches(make_units(examples, lookahead, chunk), batch_size, rng)


def run_training(pool: WorkerPool, plan: TrainPlan, protocol: GtcConfig | BmufConfig, data: TrainData,
                 batch_size: int = 16, seed: int = 0, baseline_error: float | None = None,
                 on_metrics: Callable[[SubEpochMetrics], None] | None = None):
    """Run every phase of ``plan`` under ``protocol``.

    Returns ``(final_model, metrics)`` where ``metrics`` has one row for the
    initial model and one per sub-epoch (per phase for labeled-only plans),
    evaluated on ``data.heldout`` when present.
    """
    lookahead = pool.model.spec.lookahead_frames
    slices = iter(_unlabeled_slices(plan, data.unlabeled))
    for p in plan.phases:
        if p.kind == LABELED and not data.labeled.get(p.offset):
            raise DataError(f"no labeled data at offset {p.offset}")
    rng = np.random.default_rng([seed, 0x5EED])
    metrics: list[SubEpochMetrics] = []
    frames_seen = 0
    has_unlabeled = any(p.kind == UNLABELED for p in plan.phases)

    if isinstance(protocol, GtcConfig):
        states = [GtcState.fresh(pool.model.params.size, protocol.tau) for _ in range(pool.num_workers)]
        bmuf = None
    else:
        eta = protocol.block_momentum
        if eta is None:
            eta = 1.0 - 1.0 / pool.num_workers
        bmuf = BmufState(eta, protocol.block_lr, protocol.block_size, protocol.nesterov)
        states = None

    def current() -> ModelParams:
        if bmuf is not None and bmuf.global_params is not None:
            return pool.model.with_params(bmuf.global_params)
        return pool.model

    def record(sub_epoch: int) -> None:
        if not data.heldout:
            return
        res: EvalResult = evaluate(current(), data.heldout)
        rer = None
        if baseline_error is not None:
            rer = relative_error_reduction(baseline_error, res.frame_error)
        row = SubEpochMetrics(sub_epoch, frames_seen, res.ce, res.frame_error, rer)
        metrics.append(row)
        log.info("sub-epoch %d: frames=%d ce=%.4f fer=%.4f", sub_epoch, frames_seen, res.ce, res.frame_error)
        if on_metrics:
            on_metrics(row)

    record(0)
    phases = plan.phases
    for i, phase in enumerate(phases):
        examples = next(slices) if phase.kind == UNLABELED else data.labeled[phase.offset]
        batches = _phase_batches(phase, examples, lookahead, batch_size, rng)
        n = pool.num_workers
        if bmuf is None:
            for r in range(0, len(batches), n):
                group = batches[r : r + n]
                group = list(group) + [None] * (n - len(group))
                gtc_round(pool, states, group, phase.lr)
                frames_seen += sum(batch_scored(mb) for mb in group if mb)
        else:
            per_worker = len(batches) // n
            if per_worker == 0:
                log.warning("phase %d (%s) has fewer minibatches than workers; skipped", i, phase.kind)
            for b in range(0, per_worker, bmuf.block_size):
                hi = min(b + bmuf.block_size, per_worker)
                blocks = [[batches[j * n + w] for j in range(b, hi)] for w in range(n)]
                bmuf_block(pool, bmuf, blocks, phase.lr)
                frames_seen += sum(batch_scored(mb) for blk in blocks for mb in blk)
        nxt = phases[i + 1] if i + 1 < len(phases) else None
        if has_unlabeled:
            boundary = nxt is None or nxt.kind == UNLABELED
        else:
            boundary = True
        if boundary:
            record(phase.sub_epoch)

    return current(), metrics
