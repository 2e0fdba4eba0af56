"""Causal temporal reduction: N tokens per frame down to exactly G.

Each frame is compared position-by-position with the previous one. Tokens
whose cosine similarity exceeds the threshold are "static" and get merged by
density-peaks clustering; the rest are "dynamic" and compete on saliency.
The budget is split proportionally so the output size never varies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

from .core import (
    FLOAT,
    FrameTokens,
    MergedStatic,
    RetainedGroup,
    SelectedDynamic,
    StreamConfig,
    rowwise_cosine,
    validate_frame,
)
from .errors import BudgetExceedsSet, EmptyStaticSet, ShapeMismatch


@dataclass(frozen=True, eq=False)
class CtrState:
    """Reduction state: the previous frame's features, or None before the first frame."""

    prev_features: Optional[np.ndarray] = None

    @property
    def nbytes(self) -> int:
        return 0 if self.prev_features is None else self.prev_features.nbytes


@dataclass(frozen=True, eq=False)
class Partition:
    static_set: np.ndarray
    dynamic_set: np.ndarray
    similarities: np.ndarray


@dataclass(frozen=True)
class BudgetSplit:
    k_s: int
    k_d: int


def partition_tokens(curr: FrameTokens, prev: np.ndarray, threshold: float) -> Partition:
    """Split token positions into static (similarity > threshold) and dynamic."""
    feats = np.asarray(curr.features)
    prev = np.asarray(prev)
    if feats.shape != prev.shape:
        raise ShapeMismatch(f"current frame {feats.shape} vs previous frame {prev.shape}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    sims = rowwise_cosine(feats, prev)
    is_static = sims > threshold
    return Partition(
        static_set=np.flatnonzero(is_static),
        dynamic_set=np.flatnonzero(~is_static),
        similarities=sims,
    )


def allocate_budget(partition: Partition, G: int, N: int) -> BudgetSplit:
    """k_s = floor(G * |S| / N), k_d = G - k_s."""
    n_static = len(partition.static_set)
    total = n_static + len(partition.dynamic_set)
    if total != N:
        raise ShapeMismatch(f"partition covers {total} tokens, expected {N}")
    if G > N:
        raise BudgetExceedsSet(f"frame budget {G} exceeds token count {N}")
    k_s = (G * n_static) // N
    return BudgetSplit(k_s=k_s, k_d=G - k_s)


def _top_by_saliency(saliency: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated scores keeps lower indices first among ties
    order = np.argsort(-saliency[candidates], kind="stable")
    return np.sort(candidates[order[:k]])


def select_dynamic(frame: FrameTokens, dynamic_set, k_d: int) -> list[tuple[int, np.ndarray]]:
    """Return the k_d most salient dynamic tokens as (index, token), sorted by index."""
    dynamic_set = np.asarray(dynamic_set, dtype=np.int64)
    if k_d > len(dynamic_set):
        raise BudgetExceedsSet(f"k_d={k_d} exceeds dynamic set of size {len(dynamic_set)}")
    if k_d <= 0:
        return []
    chosen = _top_by_saliency(np.asarray(frame.saliency), dynamic_set, k_d)
    return [(int(i), frame.features[i]) for i in chosen]


def cosine_distance_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise 1 - cos distances, with an exact zero diagonal."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    degenerate = norms < 1e-12
    unit = x / np.where(degenerate, 1.0, norms)[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    # zero-norm tokens are maximally dissimilar from everything else
    sims[degenerate, :] = 0.0
    sims[:, degenerate] = 0.0
    dist = 1.0 - sims
    np.fill_diagonal(dist, 0.0)
    return dist


def density_peak_centers(dist: np.ndarray, k: int) -> np.ndarray:
    """Positions (into ``dist``) of the k density-peak centers, ascending.

    rho is a Gaussian-kernel density with cutoff at the median pairwise
    distance; delta is the distance to the nearest denser point, ordering
    ties in rho by position. Centers are the k largest rho * delta.
    """
    n = dist.shape[0]
    if k >= n:
        return np.arange(n)
    iu = np.triu_indices(n, 1)
    cutoff = float(np.median(dist[iu]))
    if cutoff > 0.0:
        kernel = np.exp(-((dist / cutoff) ** 2))
    else:
        kernel = (dist == 0.0).astype(np.float64)
    np.fill_diagonal(kernel, 0.0)
    # sorting each row first makes the sum independent of member order
    rho = np.sort(kernel, axis=1).sum(axis=1)

    by_density = np.lexsort((np.arange(n), -rho))
    ranked = dist[np.ix_(by_density, by_density)]
    # only points earlier in density order count as "denser"
    ranked[np.triu_indices(n)] = np.inf
    delta = np.empty(n)
    delta[by_density] = ranked.min(axis=1)
    delta[by_density[0]] = dist[by_density[0]].max()

    gamma = rho * delta
    order = np.argsort(-gamma, kind="stable")
    return np.sort(order[:k])


def merge_static(frame: FrameTokens, static_set, k_s: int) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """Cluster static tokens into k_s groups and average each group.

    Returns ``(member_indices, merged_token)`` pairs ordered by center index.
    Member indices refer to token positions in the frame.
    """
    static_set = np.asarray(static_set, dtype=np.int64)
    if k_s > len(static_set):
        raise BudgetExceedsSet(f"k_s={k_s} exceeds static set of size {len(static_set)}")
    if k_s <= 0:
        return []
    if len(static_set) == 0:
        raise EmptyStaticSet("cannot merge an empty static set into a nonzero budget")

    feats = np.asarray(frame.features, dtype=np.float64)[static_set]
    dist = cosine_distance_matrix(feats)
    centers = density_peak_centers(dist, k_s)

    # each center anchors its own cluster; others join the nearest center (lowest wins ties)
    assign = np.argmin(dist[:, centers], axis=1)
    assign[centers] = np.arange(len(centers))

    k = len(centers)
    order = np.argsort(assign, kind="stable")
    bounds = np.cumsum(np.bincount(assign, minlength=k))[:-1]
    sums = np.zeros((k, feats.shape[1]))
    np.add.at(sums, assign, feats)
    means = (sums / np.bincount(assign, minlength=k)[:, None]).astype(FLOAT)
    return [(tuple(static_set[members].tolist()), means[c])
            for c, members in enumerate(np.split(order, bounds))]


@dataclass(frozen=True)
class ReductionStats:
    static_count: int
    dynamic_count: int
    split: BudgetSplit


def reduce_frame_with_stats(
    frame: FrameTokens, state: CtrState, cfg: StreamConfig
) -> tuple[RetainedGroup, CtrState, ReductionStats]:
    """:func:`reduce_frame` that also reports partition sizes and the budget split."""
    validate_frame(frame, cfg)
    G, N = cfg.frame_budget, cfg.tokens_per_frame
    feats = np.asarray(frame.features)

    if state.prev_features is None:
        split = BudgetSplit(k_s=0, k_d=G)
        stats = ReductionStats(static_count=0, dynamic_count=N, split=split)
        dynamic = select_dynamic(frame, np.arange(N), G)
        merged = []
    else:
        part = partition_tokens(frame, state.prev_features, cfg.similarity_threshold)
        split = allocate_budget(part, G, N)
        stats = ReductionStats(len(part.static_set), len(part.dynamic_set), split)
        dynamic = select_dynamic(frame, part.dynamic_set, split.k_d)
        merged = merge_static(frame, part.static_set, split.k_s)

    tokens = np.empty((G, feats.shape[1]), dtype=FLOAT)
    origins = []
    for row, (idx, tok) in enumerate(dynamic):
        tokens[row] = tok
        origins.append(SelectedDynamic(idx))
    for row, (members, tok) in enumerate(merged, start=len(dynamic)):
        tokens[row] = tok
        origins.append(MergedStatic(members))
    assert len(origins) == G

    group = RetainedGroup(frame_index=frame.frame_index, tokens=tokens, origins=tuple(origins))
    new_state = CtrState(prev_features=np.array(feats, dtype=FLOAT, copy=True))
    return group, new_state, stats


def reduce_frame(frame: FrameTokens, state: CtrState, cfg: StreamConfig) -> tuple[RetainedGroup, CtrState]:
    """Reduce one frame to exactly ``cfg.frame_budget`` tokens.

    The first frame of a stream has nothing to compare against, so every
    token is treated as dynamic. Output order is selected dynamic tokens by
    index, then merged static clusters by center index.
    """
    group, new_state, _ = reduce_frame_with_stats(frame, state, cfg)
    return group, new_state


def reduce_stream(
    frames: Iterable[FrameTokens],
    cfg: StreamConfig,
    state: Optional[CtrState] = None,
) -> Iterator[RetainedGroup]:
    """Reduce frames one after another, threading the state through."""
    state = state or CtrState()
    for frame in frames:
        group, state = reduce_frame(frame, state, cfg)
        yield group


def compute_saliency_chunked(features: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Attention saliency without materializing the N x N attention matrix.

    Saliency of token j is the mean attention it receives,
    ``mean_i softmax_j(F F^T / sqrt(d))[i, j]``, accumulated over row chunks
    of size ``chunk`` (peak extra memory chunk x N) and then min-max scaled
    to [0, 1]. A constant result maps to 0.5 everywhere.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    f = np.asarray(features, dtype=np.float64)
    n, d = f.shape
    scale = 1.0 / np.sqrt(d)
    col_sum = np.zeros(n)
    for start in range(0, n, chunk):
        logits = (f[start:start + chunk] @ f.T) * scale
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        col_sum += p.sum(axis=0)
    return normalize_saliency(col_sum / n)


def normalize_saliency(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    # rounding noise on a flat profile must not be stretched to [0, 1]
    if hi - lo <= 1e-9 * max(abs(hi), 1e-300):
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)
