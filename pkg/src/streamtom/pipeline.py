"""Per-stream composition: reduce each frame, project to kv, store quantized.

The language model is stood in for by a seeded linear projector, since the
reduction and memory mechanisms only need *some* deterministic kv per token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .core import FLOAT, FrameTokens, KvGroup, RetainedGroup, StreamConfig
from .ctr import CtrState, reduce_frame_with_stats
from .oqm import ActiveKv, MemoryStore, assemble_active, retrieve

_WEIGHT_RANGE = 1 << 15


@dataclass(frozen=True, eq=False)
class KvProjector:
    """Fixed linear maps from feature width d to H x d_h keys and values.

    Weights are drawn as integers from a PCG64 stream and scaled, so a given
    seed yields the same matrices on every platform.
    """

    key_weight: np.ndarray
    value_weight: np.ndarray
    kv_heads: int
    head_dim: int

    @classmethod
    def from_seed(cls, seed: int, feature_dim: int, kv_heads: int, head_dim: int) -> "KvProjector":
        rng = np.random.Generator(np.random.PCG64(seed))
        shape = (feature_dim, kv_heads * head_dim)
        scale = 1.0 / (_WEIGHT_RANGE * np.sqrt(feature_dim))
        wk = rng.integers(-_WEIGHT_RANGE, _WEIGHT_RANGE, size=shape, dtype=np.int64) * scale
        wv = rng.integers(-_WEIGHT_RANGE, _WEIGHT_RANGE, size=shape, dtype=np.int64) * scale
        return cls(wk.astype(FLOAT), wv.astype(FLOAT), kv_heads, head_dim)

    @classmethod
    def for_config(cls, cfg: StreamConfig, seed: int = 0) -> "KvProjector":
        return cls.from_seed(seed, cfg.feature_dim, cfg.kv_heads, cfg.head_dim)

    def _apply(self, tokens: np.ndarray, weight: np.ndarray) -> np.ndarray:
        out = tokens.astype(np.float64) @ weight.astype(np.float64)
        g = tokens.shape[0]
        return out.reshape(g, self.kv_heads, self.head_dim).transpose(1, 0, 2).astype(FLOAT)

    def project(self, group: RetainedGroup) -> KvGroup:
        """Keys and values for a reduced group; raw frames are not accepted."""
        if not isinstance(group, RetainedGroup):
            raise TypeError("only reduced groups can be projected into kv")
        return KvGroup(keys=self._apply(group.tokens, self.key_weight),
                       values=self._apply(group.tokens, self.value_weight),
                       frame_index=group.frame_index)


@dataclass(frozen=True)
class FrameReport:
    frame_index: int
    static_count: int
    dynamic_count: int
    k_s: int
    k_d: int
    bytes_appended: int
    group: RetainedGroup = field(repr=False, compare=False)


@dataclass(frozen=True)
class QueryReport:
    selected: tuple[int, ...]
    active_tokens: int
    dequantized_bytes: int


@dataclass
class PipelineState:
    config: StreamConfig
    ctr_state: CtrState = field(default_factory=CtrState)
    store: Optional[MemoryStore] = None
    frame_counter: int = 0

    def __post_init__(self):
        if self.store is None:
            cfg = self.config
            self.store = MemoryStore(kv_heads=cfg.kv_heads, frame_budget=cfg.frame_budget,
                                     head_dim=cfg.head_dim, bits=cfg.quant_bits)

    @classmethod
    def start(cls, config: StreamConfig, system_prefix: Optional[KvGroup] = None) -> "PipelineState":
        """New stream with optional full-precision system kv (instructions, task text)."""
        store = MemoryStore(kv_heads=config.kv_heads, frame_budget=config.frame_budget,
                            head_dim=config.head_dim, bits=config.quant_bits, prefix=system_prefix)
        return cls(config=config, store=store)


def ingest_frame(state: PipelineState, frame: FrameTokens, proj: KvProjector) -> FrameReport:
    """Reduce, project and store one frame. Mutates ``state``."""
    cfg = state.config
    group, state.ctr_state, stats = reduce_frame_with_stats(frame, state.ctr_state, cfg)
    stored = state.store.append(proj.project(group), cfg.quant_bits)
    state.frame_counter += 1
    return FrameReport(frame_index=frame.frame_index, static_count=stats.static_count,
                       dynamic_count=stats.dynamic_count, k_s=stats.split.k_s, k_d=stats.split.k_d,
                       bytes_appended=stored.nbytes, group=group)


def batched(items: Iterable, size: int) -> Iterator[list]:
    """Group an iterable into lists of ``size`` (the last one may be shorter)."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    batch = []
    for item in items:
        batch.append(item)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def ingest_stream(state: PipelineState, frames: Iterable[FrameTokens], proj: KvProjector,
                  batch_size: int = 1) -> list[FrameReport]:
    """Ingest frames in driver batches of ``batch_size``.

    Frames inside a batch are still reduced in order, each against its
    predecessor, so stored bytes never depend on the batch size.
    """
    reports: list[FrameReport] = []
    for batch in batched(frames, batch_size):
        reports.extend(ingest_frame(state, f, proj) for f in batch)
    return reports


def answer_query(state: PipelineState, q, k: Optional[int] = None) -> tuple[ActiveKv, QueryReport]:
    """Retrieve at most k groups for query vector ``q`` and dequantize only those."""
    k = state.config.retrieval_top_k if k is None else k
    selected = retrieve(state.store, q, k)
    active = assemble_active(state.store, selected)
    report = QueryReport(selected=tuple(selected), active_tokens=active.retained_tokens,
                         dequantized_bytes=active.dequantized_bytes)
    return active, report
