"""Domain types, configuration and small numeric primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import NonFiniteValue, SaliencyOutOfRange, ShapeMismatch

NORM_EPS = 1e-12

FLOAT = np.float32


@dataclass(frozen=True)
class StreamConfig:
    """Per-stream settings for token reduction and quantized memory.

    Defaults follow the reference deployment: 196 tokens per frame, 50 kept,
    similarity threshold 0.9, 4-bit storage and a 12k retained-token budget
    at query time (240 groups of 50).
    """

    tokens_per_frame: int = 196
    feature_dim: int = 64
    kv_heads: int = 4
    head_dim: int = 128
    fps: float = 0.5
    similarity_threshold: float = 0.9
    frame_budget: int = 50
    retrieval_top_k: int = 240
    total_token_budget: int = 12000
    quant_bits: int = 4
    dtype_bytes: int = 2

    def __post_init__(self):
        for name in ("tokens_per_frame", "feature_dim", "kv_heads", "head_dim",
                     "frame_budget", "retrieval_top_k", "dtype_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ValueError(f"similarity_threshold must lie in [0, 1], got {self.similarity_threshold}")
        if self.frame_budget > self.tokens_per_frame:
            raise ValueError(
                f"frame_budget ({self.frame_budget}) exceeds tokens_per_frame ({self.tokens_per_frame})")
        if self.quant_bits not in (2, 4):
            raise ValueError(f"quant_bits must be 2 or 4, got {self.quant_bits}")
        if self.retrieval_top_k * self.frame_budget > self.total_token_budget:
            raise ValueError(
                f"retrieval_top_k * frame_budget = {self.retrieval_top_k * self.frame_budget} "
                f"exceeds total_token_budget {self.total_token_budget}")

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.head_dim


@dataclass(frozen=True, eq=False)
class FrameTokens:
    """One frame's token features (N x d) and per-token saliency in [0, 1]."""

    frame_index: int
    features: np.ndarray
    saliency: np.ndarray

    @property
    def num_tokens(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class MergedStatic:
    members: tuple[int, ...]


@dataclass(frozen=True)
class SelectedDynamic:
    source: int


Origin = Union[MergedStatic, SelectedDynamic]


@dataclass(frozen=True, eq=False)
class RetainedGroup:
    """Exactly G tokens surviving reduction for one frame."""

    frame_index: int
    tokens: np.ndarray
    origins: tuple[Origin, ...] = field(default=())

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def dynamic_indices(self) -> list[int]:
        return [o.source for o in self.origins if isinstance(o, SelectedDynamic)]

    @property
    def static_clusters(self) -> list[tuple[int, ...]]:
        return [o.members for o in self.origins if isinstance(o, MergedStatic)]


@dataclass(frozen=True, eq=False)
class KvGroup:
    """Keys and values for one group, each shaped (H, G, d_h)."""

    keys: np.ndarray
    values: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.keys.ndim != 3 or self.keys.shape != self.values.shape:
            raise ShapeMismatch(
                f"keys {self.keys.shape} and values {self.values.shape} must share an (H, G, d_h) shape")
        if not (np.isfinite(self.keys).all() and np.isfinite(self.values).all()):
            raise NonFiniteValue(f"group for frame {self.frame_index} has non-finite entries")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.keys.shape

    @property
    def num_tokens(self) -> int:
        return self.keys.shape[1]


def cosine_with_flag(a, b) -> tuple[float, bool]:
    """Cosine similarity plus a flag telling whether either norm was degenerate."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0, True
    sim = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, sim)), False


def cosine_similarity(a, b) -> float:
    """Cosine similarity clamped to [-1, 1].

    A zero (norm < 1e-12) operand yields 0.0 so that missing content always
    reads as dissimilar. Use :func:`cosine_with_flag` to detect that case.
    """
    return cosine_with_flag(a, b)[0]


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between matching rows of two (N, d) matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dots = np.einsum("ij,ij->i", a, b)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    degenerate = (na < NORM_EPS) | (nb < NORM_EPS)
    denom = np.where(degenerate, 1.0, na * nb)
    sims = np.clip(dots / denom, -1.0, 1.0)
    sims[degenerate] = 0.0
    return sims


def validate_frame(frame: FrameTokens, cfg: StreamConfig) -> None:
    """Raise if ``frame`` does not fit ``cfg``; return None otherwise.

    Every other module trusts frames that pass this check.
    """
    feats = np.asarray(frame.features)
    sal = np.asarray(frame.saliency)
    n, d = cfg.tokens_per_frame, cfg.feature_dim
    if feats.ndim != 2 or feats.shape != (n, d):
        raise ShapeMismatch(f"frame {frame.frame_index}: features shape {feats.shape}, expected ({n}, {d})")
    if sal.shape != (n,):
        raise ShapeMismatch(f"frame {frame.frame_index}: saliency shape {sal.shape}, expected ({n},)")
    bad = np.argwhere(~np.isfinite(feats))
    if len(bad):
        i, j = bad[0]
        raise NonFiniteValue(f"frame {frame.frame_index}: features[{i}, {j}] is not finite")
    bad = np.flatnonzero(~np.isfinite(sal))
    if len(bad):
        raise NonFiniteValue(f"frame {frame.frame_index}: saliency[{bad[0]}] is not finite")
    bad = np.flatnonzero((sal < 0.0) | (sal > 1.0))
    if len(bad):
        raise SaliencyOutOfRange(
            f"frame {frame.frame_index}: saliency[{bad[0]}] = {sal[bad[0]]} outside [0, 1]")
