"""LSTM acoustic model core: forward pass, cross-entropy, BPTT, SGD.

Everything is plain numpy. A model is a :class:`ModelSpec` plus one flat
parameter vector; named per-layer views are carved out of that vector so
gradients, replicas and checkpoints all share one layout.

Arrays of frames are ``(T, F)`` for one sequence or ``(B, T, F)`` for a
batch of equal-length sequences. Targets are either integer labels
``(..., T)`` where a negative label marks an unscored frame, or dense
probability rows ``(..., T, D)`` where an all-zero row is unscored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, NonFiniteError, StoreFormatError

INIT_SCALE = 0.05

CHECKPOINT_MAGIC = b"DFMD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    layer_sizes: tuple[int, ...]
    num_outputs: int
    bidirectional: bool = False
    lookahead_frames: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(h) for h in self.layer_sizes))
        if self.input_dim < 1 or self.num_outputs < 1:
            raise ValueError("input_dim and num_outputs must be positive")
        if not self.layer_sizes or min(self.layer_sizes) < 1:
            raise ValueError("need at least one LSTM layer with positive width")
        if self.lookahead_frames < 0:
            raise ValueError("lookahead_frames must be >= 0")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) list describing the flat parameter vector."""
        entries = []
        in_dim = self.input_dim
        dirs = ("fw", "bw") if self.bidirectional else ("fw",)
        for layer, hidden in enumerate(self.layer_sizes):
            for d in dirs:
                prefix = f"lstm{layer}.{d}"
                entries.append((f"{prefix}.w_x", (4 * hidden, in_dim)))
                entries.append((f"{prefix}.w_h", (4 * hidden, hidden)))
                entries.append((f"{prefix}.b", (4 * hidden,)))
            in_dim = hidden * self.directions
        entries.append(("out.w", (self.num_outputs, in_dim)))
        entries.append(("out.b", (self.num_outputs,)))
        return entries

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())


# Reference topologies: 5x768 unidirectional student with 3-frame look-ahead
# and a 5x768 bidirectional teacher, both over 3,183 senones.
PAPER_STUDENT = ModelSpec(192, (768,) * 5, 3183, bidirectional=False, lookahead_frames=3)
PAPER_TEACHER = ModelSpec(192, (768,) * 5, 3183, bidirectional=True, lookahead_frames=0)


def _slices(spec: ModelSpec) -> dict[str, tuple[slice, tuple[int, ...]]]:
    out = {}
    pos = 0
    for name, shape in spec.layout():
        n = int(np.prod(shape))
        out[name] = (slice(pos, pos + n), shape)
        pos += n
    return out


class ModelParams:
    """Immutable flat parameter vector with named per-layer views."""

    def __init__(self, spec: ModelSpec, params: np.ndarray):
        params = np.array(params, copy=True)
        if params.ndim != 1 or params.size != spec.num_params:
            raise DimensionError(
                f"expected {spec.num_params} parameters for {spec}, got shape {params.shape}"
            )
        params.flags.writeable = False
        self.spec = spec
        self.params = params
        self._slices = _slices(spec)

    @classmethod
    def init(cls, spec: ModelSpec, seed: int, dtype=np.float32, scale: float = INIT_SCALE):
        rng = np.random.default_rng(seed)
        return cls(spec, rng.uniform(-scale, scale, spec.num_params).astype(dtype))

    @classmethod
    def zeros(cls, spec: ModelSpec, dtype=np.float32):
        return cls(spec, np.zeros(spec.num_params, dtype=dtype))

    @property
    def dtype(self):
        return self.params.dtype

    def names(self) -> list[str]:
        return list(self._slices)

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self._slices[name]
        return self.params[sl].reshape(shape)

    def slice_of(self, name: str) -> slice:
        return self._slices[name][0]

    def with_params(self, params: np.ndarray) -> "ModelParams":
        return ModelParams(self.spec, params)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.spec, self.params.astype(dtype))

    def replace(self, **named: np.ndarray) -> "ModelParams":
        """Copy with some named blocks overwritten (handy for hand-set weights)."""
        flat = self.params.copy()
        for name, value in named.items():
            sl, shape = self._slices[name]
            flat[sl] = np.broadcast_to(np.asarray(value, dtype=flat.dtype), shape).ravel()
        return ModelParams(self.spec, flat)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.params.dtype == other.params.dtype
            and self.params.tobytes() == other.params.tobytes()
        )

    def __repr__(self):
        return f"ModelParams({self.spec}, n={self.params.size}, dtype={self.dtype})"


# ---------------------------------------------------------------------------
# elementwise helpers


def _sigmoid(x):
    return 0.5 * np.tanh(0.5 * x) + 0.5


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# targets


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """Dense targets from labels; negative labels become all-zero (unscored) rows."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    valid = labels >= 0
    out[valid, labels[valid]] = 1
    return out


def align_targets(targets: np.ndarray, lookahead: int) -> np.ndarray:
    """Shift targets so row t is scored against frame t - lookahead.

    The first ``lookahead`` rows become unscored.
    """
    targets = np.asarray(targets)
    if lookahead == 0:
        return targets
    out = np.full_like(targets, -1) if targets.dtype.kind in "iu" else np.zeros_like(targets)
    dense = targets.dtype.kind == "f"
    time_axis = targets.ndim - 2 if dense else targets.ndim - 1
    src = [slice(None)] * targets.ndim
    dst = [slice(None)] * targets.ndim
    src[time_axis] = slice(0, max(targets.shape[time_axis] - lookahead, 0))
    dst[time_axis] = slice(lookahead, None)
    out[tuple(dst)] = targets[tuple(src)]
    return out


def scored_mask(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.dtype.kind in "iu":
        return targets >= 0
    return targets.sum(axis=-1) > 0


def ce_loss(logits: np.ndarray, targets: np.ndarray, normalizer: float | None = None):
    """Cross-entropy between targets and softmax(logits), averaged over scored frames.

    Returns ``(loss, grad)`` where grad has the shape of ``logits`` and equals
    ``(softmax - target) / normalizer`` on scored rows and 0 elsewhere.
    ``normalizer`` defaults to the number of scored frames.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    hard = targets.dtype.kind in "iu"
    expect = logits.shape[:-1] if hard else logits.shape
    if targets.shape != expect:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    mask = scored_mask(targets)
    if normalizer is None:
        normalizer = int(mask.sum())
    logp = log_softmax(logits)
    probs = np.exp(logp)
    if normalizer == 0:
        return 0.0, np.zeros_like(logits)
    if hard:
        safe = np.where(mask, targets, 0)
        picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
        loss = -float(np.where(mask, picked, 0).sum()) / normalizer
        grad = probs
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1, -1)
    else:
        targets = targets.astype(logits.dtype, copy=False)
        loss = -float((targets * logp).sum()) / normalizer
        grad = probs - targets
    grad *= mask[..., None]
    grad /= normalizer
    return loss, grad


# ---------------------------------------------------------------------------
# forward / backward


def _frames(features) -> np.ndarray:
    return np.asarray(getattr(features, "frames", features))


def _lstm_forward(x, w_x, w_h, b, reverse):
    bsz, steps, _ = x.shape
    hidden = w_h.shape[1]
    xw = x @ w_x.T + b
    gates = np.empty_like(xw)
    cells = np.empty((bsz, steps, hidden), dtype=x.dtype)
    tanh_c = np.empty_like(cells)
    hs = np.empty_like(cells)
    h = np.zeros((bsz, hidden), dtype=x.dtype)
    c = np.zeros_like(h)
    w_hT = w_h.T
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        a = xw[:, t] + h @ w_hT
        # gate order: input, forget, cell candidate, output
        act = gates[:, t]
        act[...] = _sigmoid(a)
        act[:, 2 * hidden : 3 * hidden] = np.tanh(a[:, 2 * hidden : 3 * hidden])
        i = act[:, :hidden]
        f = act[:, hidden : 2 * hidden]
        g = act[:, 2 * hidden : 3 * hidden]
        o = act[:, 3 * hidden :]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cells[:, t] = c
        tanh_c[:, t] = tc
        hs[:, t] = h
    return hs, (x, gates, cells, tanh_c, hs)


def _shift_prev(arr, reverse):
    """Value at the previously processed step (zero before the first)."""
    out = np.zeros_like(arr)
    if reverse:
        out[:, :-1] = arr[:, 1:]
    else:
        out[:, 1:] = arr[:, :-1]
    return out


def _lstm_backward(dh_all, cache, w_x, w_h, reverse):
    x, gates, cells, tanh_c, hs = cache
    bsz, steps, hidden = hs.shape
    c_prev_all = _shift_prev(cells, reverse)
    da_all = np.empty_like(gates)
    dh_next = np.zeros((bsz, hidden), dtype=x.dtype)
    dc_next = np.zeros_like(dh_next)
    order = range(steps) if reverse else range(steps - 1, -1, -1)
    for t in order:
        i = gates[:, t, :hidden]
        f = gates[:, t, hidden : 2 * hidden]
        g = gates[:, t, 2 * hidden : 3 * hidden]
        o = gates[:, t, 3 * hidden :]
        tc = tanh_c[:, t]
        dh = dh_all[:, t] + dh_next
        dc = dh * o * (1 - tc * tc) + dc_next
        da = da_all[:, t]
        da[:, :hidden] = dc * g * i * (1 - i)
        da[:, hidden : 2 * hidden] = dc * c_prev_all[:, t] * f * (1 - f)
        da[:, 2 * hidden : 3 * hidden] = dc * i * (1 - g * g)
        da[:, 3 * hidden :] = dh * tc * o * (1 - o)
        dh_next = da @ w_h
        dc_next = dc * f
    da_flat = da_all.reshape(-1, 4 * hidden)
    h_prev = _shift_prev(hs, reverse).reshape(-1, hidden)
    grads = {
        "w_x": da_flat.T @ x.reshape(-1, x.shape[-1]),
        "w_h": da_flat.T @ h_prev,
        "b": da_flat.sum(axis=0),
    }
    dx = da_all @ w_x
    return dx, grads


def _forward_batch(model: ModelParams, x: np.ndarray):
    spec = model.spec
    if x.shape[-1] != spec.input_dim:
        raise DimensionError(f"frame dim {x.shape[-1]} != model input_dim {spec.input_dim}")
    dirs = ("fw", "bw") if spec.bidirectional else ("fw",)
    caches = []
    h = x
    for layer in range(len(spec.layer_sizes)):
        outs = []
        layer_cache = []
        for d in dirs:
            p = f"lstm{layer}.{d}"
            hd, cache = _lstm_forward(h, model[f"{p}.w_x"], model[f"{p}.w_h"], model[f"{p}.b"], d == "bw")
            outs.append(hd)
            layer_cache.append(cache)
        caches.append(layer_cache)
        h = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=-1)
    logits = h @ model["out.w"].T + model["out.b"]
    return logits, (h, caches)


def _backward_batch(model: ModelParams, dlogits: np.ndarray, state) -> np.ndarray:
    spec = model.spec
    top, caches = state
    grad = np.zeros(spec.num_params, dtype=model.dtype)
    flat_d = dlogits.reshape(-1, dlogits.shape[-1])
    grad[model.slice_of("out.w")] = (flat_d.T @ top.reshape(-1, top.shape[-1])).ravel()
    grad[model.slice_of("out.b")] = flat_d.sum(axis=0)
    dh = dlogits @ model["out.w"]
    dirs = ("fw", "bw") if spec.bidirectional else ("fw",)
    for layer in range(len(spec.layer_sizes) - 1, -1, -1):
        hidden = spec.layer_sizes[layer]
        dx = None
        for k, d in enumerate(dirs):
            p = f"lstm{layer}.{d}"
            dpart = dh[..., k * hidden : (k + 1) * hidden]
            dxd, g = _lstm_backward(dpart, caches[layer][k], model[f"{p}.w_x"], model[f"{p}.w_h"], d == "bw")
            for key, val in g.items():
                grad[model.slice_of(f"{p}.{key}")] = val.ravel()
            dx = dxd if dx is None else dx + dxd
        dh = dx
    return grad


def forward(model: ModelParams, features) -> np.ndarray:
    """Logits for each frame: ``(T, D)`` for one sequence, ``(B, T, D)`` for a batch."""
    x = _frames(features).astype(model.dtype, copy=False)
    single = x.ndim == 2
    if single:
        x = x[None]
    logits, _ = _forward_batch(model, x)
    check_finite(logits, "logits")
    return logits[0] if single else logits


def loss_and_grad(model: ModelParams, features, targets, normalizer: float | None = None):
    """CE loss over one sequence (or equal-length batch) and its flat parameter gradient."""
    x = _frames(features).astype(model.dtype, copy=False)
    targets = np.asarray(targets)
    single = x.ndim == 2
    if single:
        x, targets = x[None], targets[None]
    if targets.shape[1] != x.shape[1] or targets.shape[0] != x.shape[0]:
        raise DimensionError(f"targets {targets.shape} do not cover frames {x.shape}")
    logits, state = _forward_batch(model, x)
    check_finite(logits, "logits")
    loss, dlogits = ce_loss(logits, targets, normalizer)
    grad = _backward_batch(model, dlogits, state)
    check_finite(grad, "gradient")
    return loss, grad


def backward_full(model: ModelParams, features, targets, normalizer: float | None = None) -> np.ndarray:
    """Full-sequence BPTT gradient of the mean CE loss."""
    return loss_and_grad(model, features, targets, normalizer)[1]


@dataclass(frozen=True)
class ChunkGrad:
    start: int
    length: int
    loss: float
    grad: np.ndarray


def chunk_bounds(num_frames: int, chunk_len: int) -> list[tuple[int, int]]:
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    return [(s, min(s + chunk_len, num_frames)) for s in range(0, num_frames, chunk_len)]


def backward_chunked(
    model: ModelParams,
    features,
    targets,
    chunk_len: int,
    rng_seed: int,
    normalizer: float | None = None,
) -> list[ChunkGrad]:
    """Per-chunk gradients, each chunk run from zero state, in seeded random order.

    ``normalizer`` defaults to the scored-frame count of the whole sequence,
    so the chunk gradients sum to the gradient of the sequence's mean loss
    with recurrent state cut at chunk boundaries.
    """
    x = _frames(features)
    targets = np.asarray(targets)
    bounds = chunk_bounds(x.shape[0], chunk_len)
    if normalizer is None:
        normalizer = int(scored_mask(targets).sum())
    order = np.random.default_rng(rng_seed).permutation(len(bounds))
    out = []
    for idx in order:
        s, e = bounds[idx]
        loss, grad = loss_and_grad(model, x[s:e], targets[s:e], normalizer)
        out.append(ChunkGrad(s, e - s, loss, grad))
    return out


def sgd_step(model: ModelParams, gradient: np.ndarray, lr: float) -> ModelParams:
    if not lr > 0:
        raise ValueError("lr must be positive")
    updated = model.params - np.asarray(lr, dtype=model.dtype) * gradient.astype(model.dtype, copy=False)
    check_finite(updated, "sgd update")
    return model.with_params(updated)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: ModelParams) -> bytes:
    spec = model.spec
    head = CHECKPOINT_MAGIC + struct.pack(
        f"<HIIBHH{len(spec.layer_sizes)}I",
        CHECKPOINT_VERSION,
        spec.input_dim,
        spec.num_outputs,
        int(spec.bidirectional),
        spec.lookahead_frames,
        len(spec.layer_sizes),
        *spec.layer_sizes,
    )
    return head + model.params.astype("<f4").tobytes()


def checkpoint_from_bytes(data: bytes) -> ModelParams:
    if data[:4] != CHECKPOINT_MAGIC:
        raise StoreFormatError("not a model checkpoint (bad magic)")
    fixed = struct.calcsize("<HIIBHH")
    if len(data) < 4 + fixed:
        raise StoreFormatError("truncated checkpoint header")
    version, input_dim, outputs, bidir, lookahead, nlayers = struct.unpack_from("<HIIBHH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise StoreFormatError(f"unsupported checkpoint version {version}")
    pos = 4 + fixed
    if len(data) < pos + 4 * nlayers:
        raise StoreFormatError("truncated checkpoint header")
    sizes = struct.unpack_from(f"<{nlayers}I", data, pos)
    pos += 4 * nlayers
    spec = ModelSpec(input_dim, sizes, outputs, bool(bidir), lookahead)
    if len(data) - pos != 4 * spec.num_params:
        raise StoreFormatError("checkpoint payload size does not match its model spec")
    params = np.frombuffer(data, dtype="<f4", offset=pos).astype(np.float32)
    return ModelParams(spec, params)


def save_checkpoint(path, model: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> ModelParams:
    return checkpoint_from_bytes(Path(path).read_bytes())
