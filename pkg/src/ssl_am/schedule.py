"""Scheduled learning: phase plans interleaving unlabeled sub-epochs with
labeled passes, exponential LR decay, offset rotation and the
chunked -> full-sequence BPTT switch."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

UNLABELED = "unlabeled"
LABELED = "labeled"
CHUNKED = "chunked"
FULL = "full"
NUM_OFFSETS = 3


@dataclass(frozen=True)
class Phase:
    kind: str
    sub_epoch: int  # 1-based unlabeled sub-epoch this phase belongs to (or epoch, for labeled-only plans)
    lr: float
    bptt: str
    chunk_len: int = 32
    offset: int | None = None
    budget: int = 0  # frames; 0 means the whole split

    def __post_init__(self):
        if self.kind not in (UNLABELED, LABELED):
            raise ValueError(f"unknown phase kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("phase lr must be positive")
        if self.bptt not in (CHUNKED, FULL):
            raise ValueError(f"unknown bptt mode {self.bptt!r}")
        if self.kind == LABELED and self.offset is None:
            raise ValueError("labeled phases need a feature offset")


@dataclass(frozen=True)
class ScheduleConfig:
    num_sub_epochs: int
    interleave_every: int = 1
    lr0: float = 0.01
    gamma: float = 0.8
    labeled_lr_multiplier: float = 1.5
    chunked_until_sub_epoch: int = 0
    chunk_len: int = 32
    sub_epoch_frames: int = 0
    trailing_labeled: bool = True

    def validate(self) -> None:
        if self.num_sub_epochs < 1:
            raise ValueError("num_sub_epochs must be >= 1")
        if not 1 <= self.interleave_every <= self.num_sub_epochs:
            raise ValueError("need 1 <= interleave_every <= num_sub_epochs")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.labeled_lr_multiplier < 1:
            raise ValueError("labeled_lr_multiplier must be >= 1")
        if not 0 <= self.chunked_until_sub_epoch <= self.num_sub_epochs:
            raise ValueError("chunked_until_sub_epoch must lie in [0, num_sub_epochs]")
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        if self.sub_epoch_frames < 0:
            raise ValueError("sub_epoch_frames must be >= 0")


@dataclass(frozen=True)
class TrainPlan:
    phases: tuple[Phase, ...]
    config: ScheduleConfig | None = None

    def __len__(self):
        return len(self.phases)

    def __iter__(self):
        return iter(self.phases)

    def kinds(self) -> str:
        return "".join("U" if p.kind == UNLABELED else "L" for p in self.phases)


def build_plan(config: ScheduleConfig) -> TrainPlan:
    config.validate()
    phases = []
    rotation = 0
    for s in range(config.num_sub_epochs):
        sub_epoch = s + 1
        lr = config.lr0 * config.gamma**s
        bptt = CHUNKED if sub_epoch <= config.chunked_until_sub_epoch else FULL
        phases.append(Phase(UNLABELED, sub_epoch, lr, bptt, config.chunk_len, None, config.sub_epoch_frames))
        last = sub_epoch == config.num_sub_epochs
        if sub_epoch % config.interleave_every == 0 or (last and config.trailing_labeled):
            phases.append(
                Phase(LABELED, sub_epoch, config.labeled_lr_multiplier * lr, bptt, config.chunk_len,
                      rotation % NUM_OFFSETS, 0)
            )
            rotation += 1
    return TrainPlan(tuple(phases), config)


def build_supervised_plan(epochs: int, full_epochs: int = 0, lr0: float = 0.01, gamma: float = 0.8,
                          chunk_len: int = 32) -> TrainPlan:
    """Labeled-only baseline recipe: chunked epochs, then full-sequence fine-tuning.

    Each epoch cycles to the next feature offset and decays the LR by ``gamma``.
    """
    if epochs < 0 or full_epochs < 0:
        raise ValueError("epoch counts must be >= 0")
    phases = []
    for e in range(epochs + full_epochs):
        bptt = CHUNKED if e < epochs else FULL
        phases.append(Phase(LABELED, e + 1, lr0 * gamma**e, bptt, chunk_len, e % NUM_OFFSETS, 0))
    return TrainPlan(tuple(phases), None)


def without_labeled(plan: TrainPlan) -> TrainPlan:
    """Same unlabeled phases with every interleaved labeled pass removed."""
    return TrainPlan(tuple(p for p in plan.phases if p.kind == UNLABELED), plan.config)


# ---------------------------------------------------------------------------
# iteration


@dataclass
class PlanCursor:
    position: int = 0


def peek_phase(plan: TrainPlan, cursor: PlanCursor) -> Phase | None:
    if cursor.position >= len(plan.phases):
        return None
    return plan.phases[cursor.position]


def next_phase(plan: TrainPlan, cursor: PlanCursor) -> Phase | None:
    """Return the phase under the cursor and advance; ``None`` once exhausted."""
    phase = peek_phase(plan, cursor)
    if phase is not None:
        cursor.position += 1
    return phase


def relative_error_reduction(baseline: float, model: float) -> float:
    if not baseline > 0:
        raise ValueError("baseline error must be positive")
    return 100.0 * (baseline - model) / baseline


# ---------------------------------------------------------------------------
# plan files
#
#   # ssl_am plan v1
#   num_sub_epochs = 4
#   ...
#   [phases]
#   unlabeled sub_epoch=1 lr=0.01 bptt=chunked chunk_len=32 budget=0
#   labeled sub_epoch=1 lr=0.015 bptt=chunked chunk_len=32 offset=0 budget=0

PLAN_HEADER = "# ssl_am plan v1"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def plan_to_text(plan: TrainPlan) -> str:
    lines = [PLAN_HEADER]
    if plan.config is not None:
        for key, value in asdict(plan.config).items():
            lines.append(f"{key} = {_fmt(value)}")
    lines.append("[phases]")
    for p in plan.phases:
        parts = [p.kind, f"sub_epoch={p.sub_epoch}", f"lr={p.lr!r}", f"bptt={p.bptt}", f"chunk_len={p.chunk_len}"]
        if p.offset is not None:
            parts.append(f"offset={p.offset}")
        parts.append(f"budget={p.budget}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _parse_value(raw: str, typ):
    if typ is bool or typ == "bool":
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if typ in (float, "float"):
        return float(raw)
    return int(raw)


def _parse_phase(line: str) -> Phase:
    kind, *kvs = line.split()
    try:
        attrs = dict(kv.split("=", 1) for kv in kvs)
        return Phase(
            kind=kind,
            sub_epoch=int(attrs["sub_epoch"]),
            lr=float(attrs["lr"]),
            bptt=attrs["bptt"],
            chunk_len=int(attrs.get("chunk_len", 32)),
            offset=int(attrs["offset"]) if "offset" in attrs else None,
            budget=int(attrs.get("budget", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"bad phase line {line!r}: {exc}") from None


def plan_from_text(text: str) -> TrainPlan:
    lines = [ln.strip() for ln in text.splitlines()]
    if not lines or lines[0] != PLAN_HEADER:
        raise ValueError("not a plan file (missing header)")
    types = {f.name: f.type for f in fields(ScheduleConfig)}
    cfg: dict = {}
    phases = []
    in_phases = False
    for ln in lines[1:]:
        if not ln or ln.startswith("#"):
            continue
        if ln == "[phases]":
            in_phases = True
            continue
        if not in_phases:
            key, _, raw = (part.strip() for part in ln.partition("="))
            if key not in types:
                raise ValueError(f"unknown plan key {key!r}")
            cfg[key] = _parse_value(raw, types[key])
            continue
        phases.append(_parse_phase(ln))
    config = ScheduleConfig(**cfg) if cfg else None
    return TrainPlan(tuple(phases), config)


def save_plan(path, plan: TrainPlan) -> None:
    Path(path).write_text(plan_to_text(plan))


def load_plan(path) -> TrainPlan:
    return plan_from_text(Path(path).read_text())


def expected_labeled_count(config: ScheduleConfig) -> int:
    if config.trailing_labeled:
        return math.ceil(config.num_sub_epochs / config.interleave_every)
    return config.num_sub_epochs // config.interleave_every
