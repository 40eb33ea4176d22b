"""Top-k teacher logits: selection, reconstruction and a random-access file store.

Store layout (little-endian)::

    header   "DFTK" | version u16 | D u32 | k u16 | enc u8
    record   id_len u16 | id bytes | T u32 | T*k * (index u16, value f32)
    trailer  count u32 | count * (fnv1a64(id) u64, record offset u64) | "DFTE"
"""

from __future__ import annotations

import mmap
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError, NotFoundError, StoreFormatError
from .featpipe import fnv1a64
from .nncore import ModelParams, forward, softmax

STORE_MAGIC = b"DFTK"
TRAILER_MAGIC = b"DFTE"
STORE_VERSION = 1
ENC_F32 = 0
DEFAULT_K = 20
DEFAULT_FILL = -1e4

_HEADER = struct.Struct("<HIHB")
HEADER_SIZE = 4 + _HEADER.size
ENTRY_DTYPE = np.dtype([("index", "<u2"), ("value", "<f4")])
ENTRY_SIZE = ENTRY_DTYPE.itemsize  # 6 bytes


@dataclass(frozen=True)
class TopKTargetRecord:
    """One frame's stored logits; indices strictly ascending."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise DataError("indices and values must be matching 1-d arrays")
        if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
            raise DataError("indices must be strictly ascending")

    @property
    def k(self) -> int:
        return self.indices.size


def select_topk_batch(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k per row of ``(T, D)`` logits, ties to the lower index.

    Returns ``(indices u16, values f32)`` each ``(T, min(k, D))`` with indices
    ascending within a row.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    z = np.asarray(logits)
    if z.ndim == 1:
        z = z[None]
    k = min(k, z.shape[1])
    # stable sort on negated logits keeps lower indices first among ties
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    order.sort(axis=1)
    values = np.take_along_axis(z, order, axis=1)
    return order.astype(np.uint16), values.astype(np.float32)


def select_topk(logits: np.ndarray, k: int = DEFAULT_K) -> TopKTargetRecord:
    z = np.asarray(logits)
    if z.ndim != 1:
        raise DataError("select_topk takes a single logit vector")
    idx, val = select_topk_batch(z, k)
    return TopKTargetRecord(idx[0], val[0])


def reconstruct_batch(indices: np.ndarray, values: np.ndarray, num_outputs: int,
                      fill: float = DEFAULT_FILL, dtype=np.float32) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and int(indices.max()) >= num_outputs:
        raise DataError(f"stored index {int(indices.max())} >= D={num_outputs}")
    out = np.full(indices.shape[:-1] + (num_outputs,), fill, dtype=dtype)
    np.put_along_axis(out, indices.astype(np.intp), np.asarray(values, dtype=dtype), axis=-1)
    return out


def reconstruct(record: TopKTargetRecord, num_outputs: int, fill: float = DEFAULT_FILL,
                dtype=np.float32) -> np.ndarray:
    return reconstruct_batch(record.indices[None], record.values[None], num_outputs, fill, dtype)[0]


def soft_targets(indices: np.ndarray, values: np.ndarray, num_outputs: int,
                 fill: float = DEFAULT_FILL, dtype=np.float32) -> np.ndarray:
    """Teacher posteriors rebuilt from stored logits, ``(T, D)``."""
    return softmax(reconstruct_batch(indices, values, num_outputs, fill, dtype))


def generate_targets(teacher: ModelParams, features, k: int = DEFAULT_K) -> tuple[np.ndarray, np.ndarray]:
    """Top-k of the teacher's logits for every frame of one sequence."""
    logits = forward(teacher, features)
    return select_topk_batch(logits, k)


# ---------------------------------------------------------------------------
# file store


def record_size(utterance_id: str, num_frames: int, k: int) -> int:
    return 2 + len(utterance_id.encode("utf-8")) + 4 + num_frames * k * ENTRY_SIZE


def store_size(frames_per_utt: dict[str, int], k: int) -> int:
    """Exact byte size of a store holding these utterances."""
    body = sum(record_size(u, t, k) for u, t in frames_per_utt.items())
    return HEADER_SIZE + body + 4 + 16 * len(frames_per_utt) + 4


class StoreWriter:
    """Streaming single writer for one store file."""

    def __init__(self, path, num_outputs: int, k: int = DEFAULT_K):
        if not 1 <= k <= num_outputs:
            raise ValueError(f"need 1 <= k <= D, got k={k}, D={num_outputs}")
        if num_outputs > 65536:
            raise ValueError("indices are stored as u16; D must be <= 65536")
        self.path = Path(path)
        self.num_outputs = num_outputs
        self.k = k
        self._index: list[tuple[int, int]] = []
        self._ids: set[str] = set()
        self._fh = open(self.path, "wb")
        self._fh.write(STORE_MAGIC + _HEADER.pack(STORE_VERSION, num_outputs, k, ENC_F32))
        self._pos = HEADER_SIZE

    def write(self, utterance_id: str, indices: np.ndarray, values: np.ndarray) -> None:
        indices = np.asarray(indices)
        values = np.asarray(values)
        if indices.ndim != 2 or indices.shape[1] != self.k or values.shape != indices.shape:
            raise DataError(f"{utterance_id}: expected (T, {self.k}) records, got {indices.shape}")
        if indices.size and int(indices.max()) >= self.num_outputs:
            raise DataError(f"{utterance_id}: index out of range for D={self.num_outputs}")
        if utterance_id in self._ids:
            raise DataError(f"duplicate utterance id {utterance_id!r}")
        uid = utterance_id.encode("utf-8")
        entries = np.empty(indices.shape, dtype=ENTRY_DTYPE)
        entries["index"] = indices
        entries["value"] = values
        blob = struct.pack("<H", len(uid)) + uid + struct.pack("<I", indices.shape[0]) + entries.tobytes()
        self._fh.write(blob)
        self._index.append((fnv1a64(uid), self._pos))
        self._ids.add(utterance_id)
        self._pos += len(blob)

    def close(self) -> None:
        if self._fh.closed:
            return
        trailer = struct.pack("<I", len(self._index))
        trailer += b"".join(struct.pack("<QQ", h, off) for h, off in self._index)
        self._fh.write(trailer + TRAILER_MAGIC)
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_store(path, records: Iterable[tuple[str, np.ndarray, np.ndarray]], num_outputs: int,
                k: int = DEFAULT_K) -> None:
    with StoreWriter(path, num_outputs, k) as w:
        for uid, idx, val in records:
            w.write(uid, idx, val)


class TargetStore:
    """Random-access reader. Read-only; safe to share between threads."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            size = fh.seek(0, 2)
            if size < HEADER_SIZE + 8:
                raise StoreFormatError(f"{path}: truncated store")
            self._buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) if size else b""
        buf = self._buf
        if buf[:4] != STORE_MAGIC:
            raise StoreFormatError(f"{path}: not a target store (bad magic)")
        version, self.num_outputs, self.k, enc = _HEADER.unpack_from(buf, 4)
        if version != STORE_VERSION:
            raise StoreFormatError(f"{path}: unsupported version {version}")
        if enc != ENC_F32:
            raise StoreFormatError(f"{path}: unknown value encoding {enc}")
        if buf[size - 4 : size] != TRAILER_MAGIC:
            raise StoreFormatError(f"{path}: missing trailer (truncated?)")
        self._offsets, self._hashes = self._locate_trailer(size)
        self._by_hash: dict[int, list[int]] = {}
        for h, off in zip(self._hashes, self._offsets):
            self._by_hash.setdefault(h, []).append(off)

    def _record_end(self, off: int) -> int:
        (idlen,) = struct.unpack_from("<H", self._buf, off)
        (nframes,) = struct.unpack_from("<I", self._buf, off + 2 + idlen)
        return off + 2 + idlen + 4 + nframes * self.k * ENTRY_SIZE

    def _locate_trailer(self, size: int):
        # The trailer length depends on the count stored at its start, so
        # try each count consistent with the file size and keep the one whose
        # index tiles the record area exactly.
        buf = self._buf
        max_n = (size - HEADER_SIZE - 8) // 16
        for n in range(max_n + 1):
            start = size - 4 - 16 * n - 4
            (count,) = struct.unpack_from("<I", buf, start)
            if count != n:
                continue
            pairs = np.frombuffer(buf, dtype="<u8", count=2 * n, offset=start + 4).reshape(n, 2)
            hashes, offsets = pairs[:, 0].tolist(), pairs[:, 1].tolist()
            if n == 0:
                if start == HEADER_SIZE:
                    return offsets, hashes
                continue
            if offsets[0] != HEADER_SIZE or any(b <= a for a, b in zip(offsets, offsets[1:])):
                continue
            if offsets[-1] >= start:
                continue
            try:
                if self._record_end(offsets[-1]) != start:
                    continue
            except struct.error:
                continue
            return offsets, hashes
        raise StoreFormatError(f"{self.path}: corrupt or truncated trailer index")

    def __len__(self) -> int:
        return len(self._offsets)

    def _parse(self, off: int):
        (idlen,) = struct.unpack_from("<H", self._buf, off)
        uid = bytes(self._buf[off + 2 : off + 2 + idlen]).decode("utf-8")
        (nframes,) = struct.unpack_from("<I", self._buf, off + 2 + idlen)
        start = off + 2 + idlen + 4
        entries = np.frombuffer(self._buf, dtype=ENTRY_DTYPE, count=nframes * self.k, offset=start)
        entries = entries.reshape(nframes, self.k)
        return uid, entries["index"].astype(np.uint16), entries["value"].astype(np.float32)

    def ids(self) -> list[str]:
        return [self._parse_id(off) for off in self._offsets]

    def _parse_id(self, off: int) -> str:
        (idlen,) = struct.unpack_from("<H", self._buf, off)
        return bytes(self._buf[off + 2 : off + 2 + idlen]).decode("utf-8")

    def __contains__(self, utterance_id: str) -> bool:
        try:
            self.read(utterance_id)
        except NotFoundError:
            return False
        return True

    def read(self, utterance_id: str) -> tuple[np.ndarray, np.ndarray]:
        """``(indices, values)`` arrays of shape ``(T, k)`` for one utterance."""
        h = fnv1a64(utterance_id.encode("utf-8"))
        for off in self._by_hash.get(h, ()):
            uid, idx, val = self._parse(off)
            if uid == utterance_id:
                return idx, val
        raise NotFoundError(f"utterance {utterance_id!r} not in {self.path}")

    def records(self, utterance_id: str) -> list[TopKTargetRecord]:
        idx, val = self.read(utterance_id)
        return [TopKTargetRecord(i, v) for i, v in zip(idx, val)]

    def __iter__(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for off in self._offsets:
            yield self._parse(off)

    def close(self) -> None:
        if isinstance(self._buf, mmap.mmap):
            self._buf.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_store(path, utterance_id: str) -> tuple[np.ndarray, np.ndarray]:
    with TargetStore(path) as store:
        idx, val = store.read(utterance_id)
        return idx.copy(), val.copy()


def merge_stores(paths, out_path) -> None:
    """Concatenate shard stores: record bodies are copied and index offsets rebased."""
    stores = [TargetStore(p) for p in paths]
    try:
        if not stores:
            raise DataError("nothing to merge")
        d, k = stores[0].num_outputs, stores[0].k
        if any((s.num_outputs, s.k) != (d, k) for s in stores):
            raise DataError("cannot merge stores with different D or k")
        seen: set[str] = set()
        with StoreWriter(out_path, d, k) as w:
            for s in stores:
                for uid, idx, val in s:
                    if uid in seen:
                        raise DataError(f"utterance {uid!r} present in more than one shard")
                    seen.add(uid)
                    w.write(uid, idx, val)
    finally:
        for s in stores:
            s.close()
