"""Synthetic streams, brute-force oracles and run metrics.

The oracles here are deliberately written as plain scalar Python with no
imports from :mod:`streamtom.ctr` or :mod:`streamtom.oqm`, so a bug in the
vectorized code cannot hide in a shared helper.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import accounting
from .core import FLOAT, FrameTokens, MergedStatic, RetainedGroup, SelectedDynamic, StreamConfig
from .oqm import dequantize_group
from .pipeline import KvProjector, PipelineState, answer_query, batched, ingest_frame

SALIENCY_MODES = ("uniform", "peaked")


@dataclass(frozen=True)
class SyntheticStreamSpec:
    """Parameters for a reproducible synthetic token stream.

    A fixed subset of ``static_fraction * N`` positions drifts slowly on the
    unit sphere; the remaining positions are redrawn at random each frame
    with probability ``dynamic_resample_rate``.
    """

    seed: int = 0
    tokens_per_frame: int = 196
    feature_dim: int = 64
    frames: int = 64
    static_fraction: float = 0.6
    drift_amplitude: float = 1e-3
    dynamic_resample_rate: float = 1.0
    saliency_mode: str = "peaked"

    def __post_init__(self):
        if self.tokens_per_frame < 1 or self.feature_dim < 1:
            raise ValueError("tokens_per_frame and feature_dim must be positive")
        if self.frames < 0:
            raise ValueError("frames must be nonnegative")
        if not 0.0 <= self.static_fraction <= 1.0:
            raise ValueError(f"static_fraction must lie in [0, 1], got {self.static_fraction}")
        if not 0.0 <= self.dynamic_resample_rate <= 1.0:
            raise ValueError(f"dynamic_resample_rate must lie in [0, 1], got {self.dynamic_resample_rate}")
        if self.drift_amplitude < 0:
            raise ValueError("drift_amplitude must be nonnegative")
        if self.saliency_mode not in SALIENCY_MODES:
            raise ValueError(f"saliency_mode must be one of {SALIENCY_MODES}")

    @property
    def static_count(self) -> int:
        return int(round(self.static_fraction * self.tokens_per_frame))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def generate_stream(spec: SyntheticStreamSpec) -> Iterator[FrameTokens]:
    """Yield ``spec.frames`` frames; the same spec always yields the same bytes."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n, d = spec.tokens_per_frame, spec.feature_dim
    is_static = np.zeros(n, dtype=bool)
    is_static[rng.permutation(n)[: spec.static_count]] = True
    dynamic_idx = np.flatnonzero(~is_static)
    static_idx = np.flatnonzero(is_static)

    state = _unit_rows(rng, n, d)
    for t in range(spec.frames):
        if t > 0:
            if spec.drift_amplitude > 0 and len(static_idx):
                noise = rng.standard_normal((len(static_idx), d)) * (spec.drift_amplitude / math.sqrt(d))
                moved = state[static_idx] + noise
                state[static_idx] = moved / np.linalg.norm(moved, axis=1, keepdims=True)
            if spec.dynamic_resample_rate > 0 and len(dynamic_idx):
                redraw = dynamic_idx[rng.random(len(dynamic_idx)) < spec.dynamic_resample_rate]
                state[redraw] = _unit_rows(rng, len(redraw), d)
        if spec.saliency_mode == "uniform":
            saliency = rng.random(n)
        else:
            saliency = np.where(is_static, 0.5 * rng.random(n), 0.5 + 0.5 * rng.random(n))
        yield FrameTokens(frame_index=t, features=state.astype(FLOAT), saliency=saliency.astype(FLOAT))


# --- oracles -------------------------------------------------------------

def _dot(a, b) -> float:
    return math.fsum(float(x) * float(y) for x, y in zip(a, b))


def _cos(a, b) -> float:
    na = math.sqrt(_dot(a, a))
    nb = math.sqrt(_dot(b, b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return max(-1.0, min(1.0, _dot(a, b) / (na * nb)))


def _median(values: list[float]) -> float:
    s = sorted(values)
    mid = len(s) // 2
    return s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2.0


def _oracle_merge(rows: list[list[float]], positions: list[int], k: int) -> list[tuple[tuple[int, ...], list[float]]]:
    n = len(rows)
    dist = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            dist[i][j] = dist[j][i] = 1.0 - _cos(rows[i], rows[j])

    if k >= n:
        centers = list(range(n))
    else:
        dc = _median([dist[i][j] for i in range(n) for j in range(i + 1, n)])
        rho = []
        for i in range(n):
            terms = []
            for j in range(n):
                if j == i:
                    continue
                if dc > 0:
                    terms.append(math.exp(-((dist[i][j] / dc) ** 2)))
                else:
                    terms.append(1.0 if dist[i][j] == 0.0 else 0.0)
            rho.append(math.fsum(terms))
        ranked = sorted(range(n), key=lambda i: (-rho[i], i))
        delta = [0.0] * n
        delta[ranked[0]] = max(dist[ranked[0]])
        for r in range(1, n):
            i = ranked[r]
            delta[i] = min(dist[i][j] for j in ranked[:r])
        gamma = [rho[i] * delta[i] for i in range(n)]
        centers = sorted(sorted(range(n), key=lambda i: (-gamma[i], i))[:k])

    members: dict[int, list[int]] = {c: [] for c in centers}
    for i in range(n):
        if i in members:
            members[i].append(i)
            continue
        best = min(centers, key=lambda c: (dist[i][c], c))
        members[best].append(i)
    out = []
    for c in centers:
        idx = sorted(members[c])
        mean = [math.fsum(rows[i][col] for i in idx) / len(idx) for col in range(len(rows[0]))]
        out.append((tuple(positions[i] for i in idx), mean))
    return out


def oracle_ctr(frame: FrameTokens, prev: Optional[np.ndarray], cfg: StreamConfig) -> RetainedGroup:
    """Straight-line scalar reduction of one frame, for differential tests."""
    feats = [[float(v) for v in row] for row in frame.features]
    sal = [float(v) for v in frame.saliency]
    n, g = cfg.tokens_per_frame, cfg.frame_budget

    if prev is None:
        static, dynamic = [], list(range(n))
        k_s = 0
    else:
        prev_rows = [[float(v) for v in row] for row in prev]
        static, dynamic = [], []
        for i in range(n):
            (static if _cos(feats[i], prev_rows[i]) > cfg.similarity_threshold else dynamic).append(i)
        k_s = (g * len(static)) // n
    k_d = g - k_s

    picked = sorted(sorted(dynamic, key=lambda i: (-sal[i], i))[:k_d])
    clusters = _oracle_merge([feats[i] for i in static], static, k_s) if k_s else []

    tokens = [feats[i] for i in picked] + [mean for _, mean in clusters]
    origins = [SelectedDynamic(i) for i in picked] + [MergedStatic(m) for m, _ in clusters]
    return RetainedGroup(frame_index=frame.frame_index,
                         tokens=np.array(tokens, dtype=FLOAT).reshape(g, -1),
                         origins=tuple(origins))


def oracle_retrieval(rep_keys: Sequence[Sequence[float]], frame_indices: Sequence[int], q, k: int) -> list[int]:
    """Full scan over every representative key, stable-sorted by similarity."""
    qv = [float(v) for v in q]
    scored = [(-_cos(qv, key), frame_indices[i], i) for i, key in enumerate(rep_keys)]
    scored.sort()
    return [i for _, _, i in scored[:k]]


def oracle_retrieval_store(store, q, k: int) -> list[int]:
    return oracle_retrieval([g.rep_key for g in store.groups], [g.frame_index for g in store.groups], q, k)


# --- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    kind: str
    index: int
    static_count: int = 0
    dynamic_count: int = 0
    k_s: int = 0
    k_d: int = 0
    stored_bytes: int = 0
    predicted_code_bytes: int = 0
    overhead_bytes: int = 0
    roundtrip_max_error: float = 0.0
    active_tokens: int = 0
    retrieval_recall: float = 0.0


CSV_HEADER = [f.name for f in fields(MetricsRow)]


def collect_run_metrics(
    state: PipelineState,
    stream: Iterable[FrameTokens],
    queries: Sequence[np.ndarray] = (),
    proj: Optional[KvProjector] = None,
    k: Optional[int] = None,
    batch_size: int = 1,
) -> list[MetricsRow]:
    """Ingest ``stream`` then answer ``queries``, one row per frame and per query.

    Frame rows carry the running ledger next to the cost-model prediction
    (code bytes) and the fixed per-group overhead, so the two reconcile as
    ``stored = prefix + frames * (code + overhead)``.
    """
    cfg = state.config
    proj = proj or KvProjector.for_config(cfg)
    code = accounting.group_code_bytes(cfg.kv_heads, cfg.frame_budget, cfg.head_dim, cfg.quant_bits)
    overhead = accounting.group_overhead_bytes(cfg.kv_heads, cfg.head_dim)
    rows = []
    for frame in (f for batch in batched(stream, batch_size) for f in batch):
        rep = ingest_frame(state, frame, proj)
        kv = proj.project(rep.group)
        restored = dequantize_group(state.store.groups[-1])
        err = max(float(np.abs(restored.keys.astype(np.float64) - kv.keys).max()),
                  float(np.abs(restored.values.astype(np.float64) - kv.values).max()))
        rows.append(MetricsRow(
            kind="frame", index=rep.frame_index, static_count=rep.static_count,
            dynamic_count=rep.dynamic_count, k_s=rep.k_s, k_d=rep.k_d,
            stored_bytes=state.store.ledger_bytes,
            predicted_code_bytes=state.store.prefix_bytes + state.frame_counter * code,
            overhead_bytes=state.frame_counter * overhead,
            roundtrip_max_error=err,
        ))
    k = cfg.retrieval_top_k if k is None else k
    for qi, q in enumerate(queries):
        active, report = answer_query(state, q, k)
        expected = set(oracle_retrieval_store(state.store, q, k))
        recall = len(expected & set(report.selected)) / len(expected) if expected else 1.0
        rows.append(MetricsRow(kind="query", index=qi, stored_bytes=state.store.ledger_bytes,
                               active_tokens=report.active_tokens, retrieval_recall=recall))
    return rows


def write_metrics_csv(rows: Iterable[MetricsRow], path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                rec = asdict(row)
                for key in ("roundtrip_max_error", "retrieval_recall"):
                    rec[key] = repr(float(rec[key]))
                writer.writerow(rec)
    except OSError as exc:
        raise OSError(f"cannot write metrics CSV {path}: {exc.strerror or exc}") from exc
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
