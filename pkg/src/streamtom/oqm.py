"""Online quantized memory.

Groups of G retained tokens are quantized on arrival with a per-head,
per-channel min/max affine map, packed into bytes and appended to an
append-only store. A full-precision token-mean of each group's keys serves as
its retrieval fingerprint, so queries rank groups without touching codes and
only the top-k winners are ever dequantized.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .core import FLOAT, KvGroup, NORM_EPS
from .errors import EmptyStore, FormatError, IndexOutOfRange, NonFiniteValue, ShapeMismatch
from .packing import pack_codes, packed_length, unpack_codes

SNAPSHOT_MAGIC = b"OQM1"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQI")  # magic, version, H, G, d_h, bits, T, prefix tokens
_FRAME_INDEX = struct.Struct("<Q")
_F32 = np.dtype("<f4")


class NonFiniteInput(NonFiniteValue):
    pass


@dataclass(frozen=True, eq=False)
class QuantParams:
    scales: np.ndarray
    offsets: np.ndarray
    bits: int

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True, eq=False)
class QuantizedGroup:
    key_codes: bytes
    value_codes: bytes
    key_params: QuantParams
    value_params: QuantParams
    rep_key: np.ndarray
    frame_index: int
    shape: tuple[int, int, int]

    @property
    def bits(self) -> int:
        return self.key_params.bits

    @property
    def num_tokens(self) -> int:
        return self.shape[1]

    @property
    def code_bytes(self) -> int:
        return len(self.key_codes) + len(self.value_codes)

    @property
    def overhead_bytes(self) -> int:
        """Scale/offset parameters for keys and values plus the rep key, in bytes."""
        h, _, dh = self.shape
        return 4 * (4 * h * dh + h * dh)

    @property
    def nbytes(self) -> int:
        return self.code_bytes + self.overhead_bytes

    def to_bytes(self) -> bytes:
        parts = [_FRAME_INDEX.pack(self.frame_index)]
        for p in (self.key_params, self.value_params):
            parts.append(np.ascontiguousarray(p.scales, dtype=_F32).tobytes())
            parts.append(np.ascontiguousarray(p.offsets, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(self.rep_key, dtype=_F32).tobytes())
        parts.append(self.key_codes)
        parts.append(self.value_codes)
        return b"".join(parts)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _quantize_tensor(x: np.ndarray, bits: int) -> tuple[bytes, QuantParams]:
    levels = (1 << bits) - 1
    lo = x.min(axis=1)
    hi = x.max(axis=1)
    scales = ((hi.astype(np.float64) - lo) / levels).astype(FLOAT)
    offsets = lo.astype(FLOAT)

    s = scales.astype(np.float64)[:, None, :]
    m = offsets.astype(np.float64)[:, None, :]
    safe = np.where(s > 0, s, 1.0)
    codes = np.clip(_round_half_away((x.astype(np.float64) - m) / safe), 0, levels)
    codes = np.where(s > 0, codes, 0).astype(np.uint8)
    # (H, G, d_h) -> (H, d_h, G): one run of G token codes per head/channel
    ordered = codes.transpose(0, 2, 1)
    return pack_codes(ordered, bits), QuantParams(scales=scales, offsets=offsets, bits=bits)


def _dequantize_tensor(data: bytes, params: QuantParams, shape: tuple[int, int, int]) -> np.ndarray:
    h, g, dh = shape
    codes = unpack_codes(data, h * g * dh, params.bits).reshape(h, dh, g).transpose(0, 2, 1)
    s = params.scales.astype(np.float64)[:, None, :]
    m = params.offsets.astype(np.float64)[:, None, :]
    return (codes * s + m).astype(FLOAT)


def quantize_group(kv: KvGroup, bits: int = 4) -> QuantizedGroup:
    """Quantize keys and values of one group to ``bits``-bit codes.

    Per (head, channel): offset = min over tokens, scale = range / (2**bits - 1),
    code = round((x - offset) / scale) clamped to the code range. Channels
    with zero range keep scale 0 and all-zero codes.
    """
    if bits not in (2, 4):
        raise ValueError(f"bits must be 2 or 4, got {bits}")
    keys = np.asarray(kv.keys)
    values = np.asarray(kv.values)
    if not (np.isfinite(keys).all() and np.isfinite(values).all()):
        raise NonFiniteInput(f"group for frame {kv.frame_index} has non-finite entries")
    key_codes, key_params = _quantize_tensor(keys, bits)
    value_codes, value_params = _quantize_tensor(values, bits)
    rep_key = keys.astype(np.float64).mean(axis=1).reshape(-1).astype(FLOAT)
    return QuantizedGroup(
        key_codes=key_codes,
        value_codes=value_codes,
        key_params=key_params,
        value_params=value_params,
        rep_key=rep_key,
        frame_index=kv.frame_index,
        shape=tuple(int(v) for v in keys.shape),
    )


def dequantize_group(q: QuantizedGroup) -> KvGroup:
    """codes * scale + offset, restored to an (H, G, d_h) KvGroup."""
    keys = _dequantize_tensor(q.key_codes, q.key_params, q.shape)
    values = _dequantize_tensor(q.value_codes, q.value_params, q.shape)
    return KvGroup(keys=keys, values=values, frame_index=q.frame_index)


@dataclass
class MemoryStore:
    """Full-precision system prefix plus an append-only list of quantized groups.

    One writer may append while readers call :func:`retrieve` or
    :func:`assemble_active`; readers see the groups present when they start.
    """

    kv_heads: int
    frame_budget: int
    head_dim: int
    bits: int = 4
    prefix: Optional[KvGroup] = None
    groups: list[QuantizedGroup] = field(default_factory=list)
    ledger_bytes: int = 0
    _rep_keys: np.ndarray = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.bits not in (2, 4):
            raise ValueError(f"bits must be 2 or 4, got {self.bits}")
        if self.prefix is not None:
            if self.prefix.shape[0] != self.kv_heads or self.prefix.shape[2] != self.head_dim:
                raise ShapeMismatch(f"prefix shape {self.prefix.shape} does not match H={self.kv_heads}, "
                                    f"d_h={self.head_dim}")
        self.ledger_bytes = self.prefix_bytes + sum(g.nbytes for g in self.groups)
        self._rep_keys = np.zeros((max(16, len(self.groups)), self.kv_width), dtype=FLOAT)
        for i, g in enumerate(self.groups):
            self._rep_keys[i] = g.rep_key

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def prefix_tokens(self) -> int:
        return 0 if self.prefix is None else self.prefix.num_tokens

    @property
    def prefix_bytes(self) -> int:
        return 0 if self.prefix is None else self.prefix.keys.size * 4 * 2

    @property
    def group_bytes(self) -> int:
        h, g, dh = self.kv_heads, self.frame_budget, self.head_dim
        return 2 * packed_length(h * g * dh, self.bits) + 4 * 5 * h * dh

    def __len__(self):
        return len(self.groups)

    def rep_keys(self) -> np.ndarray:
        """Stacked representative keys, one row per stored group (a read-only view)."""
        view = self._rep_keys[: len(self.groups)]
        view.flags.writeable = False
        return view

    def append(self, kv: KvGroup, bits: Optional[int] = None) -> QuantizedGroup:
        bits = self.bits if bits is None else bits
        if bits != self.bits:
            raise ValueError(f"store holds {self.bits}-bit groups, got a {bits}-bit append")
        expected = (self.kv_heads, self.frame_budget, self.head_dim)
        if kv.shape != expected:
            raise ShapeMismatch(f"group shape {kv.shape}, store expects {expected}")
        q = quantize_group(kv, bits)
        with self._lock:
            n = len(self.groups)
            if n == self._rep_keys.shape[0]:
                grown = np.zeros((2 * n, self.kv_width), dtype=FLOAT)
                grown[:n] = self._rep_keys
                self._rep_keys = grown
            self._rep_keys[n] = q.rep_key
            self.groups.append(q)
            self.ledger_bytes += q.nbytes
        return q

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.kv_heads, self.frame_budget,
                              self.head_dim, self.bits, len(self.groups), self.prefix_tokens)]
        if self.prefix is not None:
            parts.append(np.ascontiguousarray(self.prefix.keys, dtype=_F32).tobytes())
            parts.append(np.ascontiguousarray(self.prefix.values, dtype=_F32).tobytes())
        parts.extend(g.to_bytes() for g in self.groups)
        return b"".join(parts)

    def save(self, fh: BinaryIO) -> int:
        data = self.to_bytes()
        fh.write(data)
        return len(data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MemoryStore":
        return _parse_snapshot(memoryview(data))

    @classmethod
    def load(cls, fh: BinaryIO) -> "MemoryStore":
        return cls.from_bytes(fh.read())


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(what, f"truncated: need {n} bytes at offset {self.pos}, "
                                    f"{len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype=_F32).astype(FLOAT)


def _parse_snapshot(buf: memoryview) -> MemoryStore:
    r = _Reader(buf)
    magic, version, h, g, dh, bits, t, p = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != SNAPSHOT_MAGIC:
        raise FormatError("magic", f"expected {SNAPSHOT_MAGIC!r}, got {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    for name, val in (("kv_heads", h), ("frame_budget", g), ("head_dim", dh)):
        if val < 1:
            raise FormatError(name, f"must be positive, got {val}")
    if bits not in (2, 4):
        raise FormatError("bits", f"must be 2 or 4, got {bits}")

    prefix = None
    if p:
        pk = r.floats(h * p * dh, "prefix keys").reshape(h, p, dh)
        pv = r.floats(h * p * dh, "prefix values").reshape(h, p, dh)
        prefix = KvGroup(keys=pk, values=pv, frame_index=0)

    width = h * dh
    code_len = packed_length(h * g * dh, bits)
    groups = []
    for i in range(t):
        (frame_index,) = _FRAME_INDEX.unpack(r.take(_FRAME_INDEX.size, f"group {i} frame_index"))
        params = []
        for which in ("key", "value"):
            s = r.floats(width, f"group {i} {which} scales").reshape(h, dh)
            m = r.floats(width, f"group {i} {which} offsets").reshape(h, dh)
            params.append(QuantParams(scales=s, offsets=m, bits=bits))
        rep = r.floats(width, f"group {i} rep_key")
        kc = bytes(r.take(code_len, f"group {i} key codes"))
        vc = bytes(r.take(code_len, f"group {i} value codes"))
        groups.append(QuantizedGroup(key_codes=kc, value_codes=vc, key_params=params[0],
                                     value_params=params[1], rep_key=rep,
                                     frame_index=frame_index, shape=(h, g, dh)))
    if r.pos != len(buf):
        raise FormatError("trailer", f"{len(buf) - r.pos} unexpected bytes after group {t - 1}")
    return MemoryStore(kv_heads=h, frame_budget=g, head_dim=dh, bits=bits, prefix=prefix, groups=groups)


def append_group(store: MemoryStore, kv: KvGroup, bits: Optional[int] = None) -> MemoryStore:
    store.append(kv, bits)
    return store


def _cosine_scores(rep_keys: np.ndarray, q: np.ndarray) -> np.ndarray:
    keys = rep_keys.astype(np.float64)
    qn = float(np.sqrt(q @ q))
    kn = np.sqrt(np.einsum("ij,ij->i", keys, keys))
    if qn < NORM_EPS:
        return np.zeros(len(keys))
    degenerate = kn < NORM_EPS
    sims = (keys @ q) / (np.where(degenerate, 1.0, kn) * qn)
    sims = np.clip(sims, -1.0, 1.0)
    sims[degenerate] = 0.0
    return sims


def retrieve(store: MemoryStore, q, k: int) -> list[int]:
    """Indices of the top-k groups by cosine(q, rep_key), best first.

    Ties go to the earlier frame. Only representative keys are read.
    """
    rep_keys = store.rep_keys()
    if len(rep_keys) == 0:
        raise EmptyStore("cannot retrieve from an empty memory store")
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != store.kv_width:
        raise ShapeMismatch(f"query width {q.shape[0]}, store width {store.kv_width}")
    if not np.isfinite(q).all():
        raise NonFiniteInput("query vector has non-finite entries")
    if k < 0:
        raise ValueError("k must be nonnegative")
    sims = _cosine_scores(rep_keys, q)
    frames = np.array([store.groups[i].frame_index for i in range(len(rep_keys))])
    order = np.lexsort((np.arange(len(sims)), frames, -sims))
    return [int(i) for i in order[:k]]


@dataclass(frozen=True, eq=False)
class ActiveKv:
    prefix: Optional[KvGroup]
    indices: tuple[int, ...]
    groups: tuple[KvGroup, ...]

    @property
    def retained_tokens(self) -> int:
        return sum(g.num_tokens for g in self.groups)

    @property
    def prefix_tokens(self) -> int:
        return 0 if self.prefix is None else self.prefix.num_tokens

    @property
    def total_tokens(self) -> int:
        return self.retained_tokens + self.prefix_tokens

    @property
    def dequantized_bytes(self) -> int:
        return sum(g.keys.nbytes + g.values.nbytes for g in self.groups)

    def concatenated(self) -> KvGroup:
        """All active keys/values along the token axis, prefix first."""
        parts = ([self.prefix] if self.prefix is not None else []) + list(self.groups)
        if not parts:
            raise EmptyStore("active set is empty")
        return KvGroup(keys=np.concatenate([p.keys for p in parts], axis=1),
                       values=np.concatenate([p.values for p in parts], axis=1))


def assemble_active(store: MemoryStore, selected: Sequence[int]) -> ActiveKv:
    """Dequantize exactly the selected groups, in stored (frame) order."""
    n = len(store.groups)
    chosen = sorted(set(int(i) for i in selected))
    for i in chosen:
        if not 0 <= i < n:
            raise IndexOutOfRange(f"group index {i} outside [0, {n})")
    groups = tuple(dequantize_group(store.groups[i]) for i in chosen)
    return ActiveKv(prefix=store.prefix, indices=tuple(chosen), groups=groups)
