"""Streaming token compression with a bounded, 4-bit quantized kv memory."""

from .core import (
    FrameTokens,
    KvGroup,
    MergedStatic,
    RetainedGroup,
    SelectedDynamic,
    StreamConfig,
    cosine_similarity,
    validate_frame,
)
from .ctr import CtrState, compute_saliency_chunked, reduce_frame
from .oqm import MemoryStore, assemble_active, dequantize_group, quantize_group, retrieve
from .pipeline import KvProjector, PipelineState, answer_query, ingest_frame, ingest_stream

__version__ = "0.1.0"

__all__ = [
    "CtrState",
    "FrameTokens",
    "KvGroup",
    "KvProjector",
    "MemoryStore",
    "MergedStatic",
    "PipelineState",
    "RetainedGroup",
    "SelectedDynamic",
    "StreamConfig",
    "answer_query",
    "assemble_active",
    "compute_saliency_chunked",
    "cosine_similarity",
    "dequantize_group",
    "ingest_frame",
    "ingest_stream",
    "quantize_group",
    "reduce_frame",
    "retrieve",
    "validate_frame",
]
