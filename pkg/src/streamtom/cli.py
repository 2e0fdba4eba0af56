"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 I/O failure, 4 bad data.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import accounting
from .core import FLOAT, KvGroup, StreamConfig
from .ctr import compute_saliency_chunked
from .errors import FormatError, StreamTomError, ValidationError
from .harness import (
    SALIENCY_MODES,
    MetricsRow,
    SyntheticStreamSpec,
    collect_run_metrics,
    generate_stream,
    oracle_retrieval_store,
    write_metrics_csv,
)
from .oqm import MemoryStore, assemble_active, retrieve
from .pipeline import KvProjector, PipelineState, answer_query
from .streamfile import StreamReader, write_stream

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def worker_count() -> int:
    """Worker cap from STREAMTOM_THREADS (0 or unset means one per CPU)."""
    raw = os.environ.get("STREAMTOM_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"STREAMTOM_THREADS must be an integer, got {raw!r}", EXIT_USAGE)
    if n < 0:
        raise CliError("STREAMTOM_THREADS must be >= 0", EXIT_USAGE)
    return n or (os.cpu_count() or 1)


def _timing(label: str, start: float) -> None:
    print(f"[time] {label}: {time.perf_counter() - start:.3f}s", file=sys.stderr)


def cmd_generate(args) -> int:
    try:
        spec = SyntheticStreamSpec(
            seed=args.seed, tokens_per_frame=args.n, feature_dim=args.dim, frames=args.frames,
            static_fraction=args.static_fraction, drift_amplitude=args.drift,
            dynamic_resample_rate=args.resample_rate,
            saliency_mode="uniform" if args.saliency == "none" else args.saliency,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    try:
        size = write_stream(args.output, generate_stream(spec), spec.tokens_per_frame,
                            spec.feature_dim, fps=args.fps, has_saliency=args.saliency != "none")
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc.strerror or exc}", EXIT_IO)
    print(f"wrote {args.output}: {spec.frames} frames, {size} bytes")
    return EXIT_OK


def _random_queries(seed: int, count: int, width: int) -> list[np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    return [rng.standard_normal(width).astype(FLOAT) for _ in range(count)]


def _system_prefix(seed: int, tokens: int, heads: int, head_dim: int) -> Optional[KvGroup]:
    if tokens <= 0:
        return None
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    keys = rng.standard_normal((heads, tokens, head_dim)).astype(FLOAT)
    values = rng.standard_normal((heads, tokens, head_dim)).astype(FLOAT)
    return KvGroup(keys=keys, values=values, frame_index=0)


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    try:
        reader = StreamReader(args.stream,
                              saliency_fn=lambda f: compute_saliency_chunked(f, args.saliency_chunk))
    except OSError as exc:
        raise CliError(f"cannot read {args.stream}: {exc.strerror or exc}", EXIT_IO)
    except FormatError as exc:
        raise CliError(f"{args.stream}: malformed stream header, {exc}", EXIT_DATA)
    h = reader.header
    top_k = args.top_k if args.top_k is not None else max(1, args.budget // args.tokens)
    try:
        cfg = StreamConfig(
            tokens_per_frame=h.tokens_per_frame, feature_dim=h.feature_dim, kv_heads=args.heads,
            head_dim=args.head_dim, fps=h.fps if h.fps > 0 else 0.5,
            similarity_threshold=args.threshold, frame_budget=args.tokens, retrieval_top_k=top_k,
            total_token_budget=args.budget, quant_bits=args.bits,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE)

    state = PipelineState.start(cfg, _system_prefix(args.seed, args.prefix_tokens, cfg.kv_heads, cfg.head_dim))
    proj = KvProjector.for_config(cfg, seed=args.seed)
    queries = _random_queries(args.seed, args.queries, cfg.kv_width)
    try:
        rows = collect_run_metrics(state, reader, (), proj, batch_size=args.batch_size)
        rows += _parallel_query_rows(state, queries, top_k)
    except ValidationError as exc:
        raise CliError(f"validation failed: {exc}", EXIT_DATA)
    _timing("ingest", t0)

    try:
        with open(args.snapshot, "wb") as fh:
            state.store.save(fh)
        if args.metrics:
            write_metrics_csv(rows, args.metrics)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO)

    T, G, N = state.frame_counter, cfg.frame_budget, cfg.tokens_per_frame
    code = sum(g.code_bytes for g in state.store.groups)
    baseline = T * accounting.baseline_frame_bytes(cfg.kv_heads, N, cfg.head_dim, 2)
    ratio = accounting.compression_ratio(N, G, 16, cfg.quant_bits)
    print(f"frames: {T}")
    print(f"tokens per frame: {G} of {N}")
    print(f"stored bytes: {state.store.ledger_bytes} (codes {code}, "
          f"overhead {state.store.ledger_bytes - code - state.store.prefix_bytes}, "
          f"prefix {state.store.prefix_bytes})")
    print(f"baseline bytes (16-bit, {N} tokens): {baseline}")
    print(f"compression ratio: {ratio:.1f}x")
    print(f"retention: {accounting.retention_percent(G, cfg.quant_bits, N, 16):.1f}%")
    if T:
        print(f"measured code-only ratio: {baseline / code:.2f}x")
    print(f"snapshot: {args.snapshot}")
    return EXIT_OK


def _parallel_query_rows(state: PipelineState, queries, k: int):
    if not queries or not len(state.store):
        return []

    def one(item):
        qi, q = item
        _, report = answer_query(state, q, k)
        expected = set(oracle_retrieval_store(state.store, q, k))
        recall = len(expected & set(report.selected)) / len(expected)
        return MetricsRow(kind="query", index=qi, stored_bytes=state.store.ledger_bytes,
                          active_tokens=report.active_tokens, retrieval_recall=recall)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(one, enumerate(queries)))


def _load_query(args, store: MemoryStore) -> np.ndarray:
    if args.group_key is not None:
        if not 0 <= args.group_key < len(store):
            raise CliError(f"--group-key {args.group_key} outside [0, {len(store)})", EXIT_USAGE)
        return store.groups[args.group_key].rep_key.astype(np.float64)
    if args.query_file is None:
        raise CliError("one of --query-file or --group-key is required", EXIT_USAGE)
    try:
        raw = Path(args.query_file).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {args.query_file}: {exc.strerror or exc}", EXIT_IO)
    if len(raw) != 4 * store.kv_width:
        raise CliError(f"query file has {len(raw)} bytes, expected {4 * store.kv_width} "
                       f"(float32 x {store.kv_width})", EXIT_DATA)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def cmd_query(args) -> int:
    try:
        data = Path(args.snapshot).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {args.snapshot}: {exc.strerror or exc}", EXIT_IO)
    try:
        store = MemoryStore.from_bytes(data)
    except (FormatError, ValidationError) as exc:
        raise CliError(f"{args.snapshot}: malformed snapshot, {exc}", EXIT_DATA)
    if not len(store):
        raise CliError(f"{args.snapshot}: snapshot holds no groups", EXIT_DATA)
    if args.k < 1:
        raise CliError("--k must be positive", EXIT_USAGE)
    q = _load_query(args, store)
    try:
        ranked = retrieve(store, q, args.k)
    except StreamTomError as exc:
        raise CliError(str(exc), EXIT_DATA)
    active = assemble_active(store, ranked)
    bound = 0.0
    for i in active.indices:
        g = store.groups[i]
        bound = max(bound, float(g.key_params.scales.max()) / 2, float(g.value_params.scales.max()) / 2)
    print(f"groups stored: {len(store)}")
    print(f"selected (ranked): {' '.join(str(i) for i in ranked)}")
    print(f"active groups: {len(active.indices)}")
    print(f"active tokens: {active.retained_tokens}")
    print(f"prefix tokens: {active.prefix_tokens}")
    print(f"dequantized bytes: {active.dequantized_bytes}")
    print(f"max round-trip error bound: {bound:.6g}")
    return EXIT_OK


def cmd_model_memory(args) -> int:
    try:
        m = accounting.CostModel(
            layers=args.layers, tokens_per_frame=args.n, kv_heads=args.heads, head_dim=args.head_dim,
            dtype_bytes=args.dtype_bytes, fps=args.fps, frame_budget=args.tokens, quant_bits=args.bits,
        )
        if args.fps <= 0 or args.seconds <= 0:
            raise ValueError("fps and seconds must be positive")
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    binary = not args.decimal
    unit = "GiB" if binary else "GB"
    base = accounting.horizon_footprint(m, args.seconds)
    comp = accounting.horizon_footprint(m, args.seconds, compressed=True)
    fp_bits = m.fp_bits
    print(f"growth rate: {accounting.growth_rate_bytes_per_sec(m):.0f} B/s")
    print(f"baseline footprint ({args.seconds:g} s): {base:.0f} B = {accounting.render_gb(base, binary)} {unit}")
    print(f"compressed footprint ({args.seconds:g} s): {comp:.0f} B = {accounting.render_gb(comp, binary)} {unit}")
    print(f"compression ratio: {accounting.compression_ratio(m.tokens_per_frame, m.frame_budget, fp_bits, m.quant_bits):.2f}x")
    print(f"retention: {accounting.retention_percent(m.frame_budget, m.quant_bits, m.tokens_per_frame, fp_bits):.1f}%")
    print(f"prefill token ratio: {accounting.prefill_cost_ratio(m.tokens_per_frame, m.frame_budget):.2f}x")
    return EXIT_OK


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamtom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic TOKS stream")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=_nonneg_int, default=64)
    g.add_argument("--n", type=_positive_int, default=196)
    g.add_argument("--dim", type=_positive_int, default=64)
    g.add_argument("--static-fraction", type=float, default=0.6)
    g.add_argument("--drift", type=float, default=1e-3)
    g.add_argument("--resample-rate", type=float, default=1.0)
    g.add_argument("--saliency", choices=SALIENCY_MODES + ("none",), default="peaked")
    g.add_argument("--fps", type=float, default=0.5)
    g.add_argument("-o", "--output", default="stream.toks")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="reduce, quantize and store a stream")
    r.add_argument("stream")
    r.add_argument("--tokens", type=_positive_int, default=50, help="frame budget G")
    r.add_argument("--bits", type=int, choices=(2, 4), default=4)
    r.add_argument("--threshold", type=float, default=0.9)
    r.add_argument("--heads", type=_positive_int, default=4)
    r.add_argument("--head-dim", type=_positive_int, default=128)
    r.add_argument("--top-k", type=_positive_int, default=None)
    r.add_argument("--budget", type=_positive_int, default=12000, help="retained tokens at query time")
    r.add_argument("--seed", type=int, default=0, help="projector and query seed")
    r.add_argument("--prefix-tokens", type=_nonneg_int, default=0)
    r.add_argument("--batch-size", type=_positive_int, default=1)
    r.add_argument("--queries", type=_nonneg_int, default=0, help="random queries to evaluate")
    r.add_argument("--saliency-chunk", type=_positive_int, default=32)
    r.add_argument("--snapshot", default="memory.oqm")
    r.add_argument("--metrics", default=None)
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("query", help="retrieve from an OQM1 snapshot")
    q.add_argument("snapshot")
    q.add_argument("--query-file", default=None, help="raw little-endian float32 vector of length H*d_h")
    q.add_argument("--group-key", type=int, default=None, help="use a stored group's rep key as the query")
    q.add_argument("--k", type=int, default=240)
    q.set_defaults(func=cmd_query)

    mm = sub.add_parser("model-memory", help="evaluate the kv-cache cost model")
    mm.add_argument("--layers", type=int, default=28)
    mm.add_argument("--n", type=int, default=196)
    mm.add_argument("--heads", type=int, default=4)
    mm.add_argument("--head-dim", type=int, default=128)
    mm.add_argument("--dtype-bytes", type=int, default=2)
    mm.add_argument("--fps", type=float, default=0.5)
    mm.add_argument("--tokens", type=int, default=50)
    mm.add_argument("--bits", type=int, default=4)
    mm.add_argument("--seconds", type=float, default=3600.0)
    mm.add_argument("--decimal", action="store_true", help="report 10^9-byte GB instead of GiB")
    mm.set_defaults(func=cmd_model_memory)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"streamtom {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
