"""TOKS binary stream files.

Layout (little-endian)::

    magic "TOKS" | u32 version | u32 N | u32 d | u64 T | f32 fps | u32 flags
    T x ( N*d f32 features, row-major | N f32 saliency if flags bit 0 )
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .core import FLOAT, FrameTokens
from .errors import FormatError

MAGIC = b"TOKS"
VERSION = 1
FLAG_SALIENCY = 1
HEADER = struct.Struct("<4sIIIQfI")
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class StreamHeader:
    tokens_per_frame: int
    feature_dim: int
    frames: int
    fps: float
    has_saliency: bool = True

    @property
    def frame_bytes(self) -> int:
        n, d = self.tokens_per_frame, self.feature_dim
        return 4 * (n * d + (n if self.has_saliency else 0))

    def pack(self) -> bytes:
        flags = FLAG_SALIENCY if self.has_saliency else 0
        return HEADER.pack(MAGIC, VERSION, self.tokens_per_frame, self.feature_dim,
                           self.frames, self.fps, flags)


def write_stream(path, frames: Iterable[FrameTokens], tokens_per_frame: int, feature_dim: int,
                 fps: float = 0.5, has_saliency: bool = True) -> int:
    """Write frames to ``path``; returns the file size in bytes.

    The frame count is patched into the header once all frames are written,
    so ``frames`` may be a generator.
    """
    header = StreamHeader(tokens_per_frame, feature_dim, 0, fps, has_saliency)
    count = 0
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for frame in frames:
            feats = np.asarray(frame.features)
            if feats.shape != (tokens_per_frame, feature_dim):
                raise FormatError("features", f"frame {count} has shape {feats.shape}")
            fh.write(np.ascontiguousarray(feats, dtype=_F32).tobytes())
            if has_saliency:
                fh.write(np.ascontiguousarray(frame.saliency, dtype=_F32).tobytes())
            count += 1
        fh.seek(0)
        fh.write(StreamHeader(tokens_per_frame, feature_dim, count, fps, has_saliency).pack())
        fh.seek(0, os.SEEK_END)
        return fh.tell()


def _parse_header(raw: bytes) -> StreamHeader:
    if len(raw) < HEADER.size:
        raise FormatError("header", f"truncated: {len(raw)} of {HEADER.size} bytes")
    magic, version, n, d, t, fps, flags = HEADER.unpack(raw[: HEADER.size])
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if n < 1:
        raise FormatError("N", f"must be positive, got {n}")
    if d < 1:
        raise FormatError("d", f"must be positive, got {d}")
    if flags & ~FLAG_SALIENCY:
        raise FormatError("flags", f"unknown bits set: {flags:#x}")
    return StreamHeader(n, d, t, float(fps), bool(flags & FLAG_SALIENCY))


class StreamReader:
    """Lazily iterate frames of a TOKS file.

    Frames without stored saliency get ``saliency=None`` unless a
    ``saliency_fn`` is supplied to compute it from the features.
    """

    def __init__(self, path, saliency_fn=None):
        self.path = Path(path)
        self.saliency_fn = saliency_fn
        with self.path.open("rb") as fh:
            self.header = _parse_header(fh.read(HEADER.size))
        size = self.path.stat().st_size
        expected = HEADER.size + self.header.frames * self.header.frame_bytes
        if size != expected:
            raise FormatError("T", f"header declares {self.header.frames} frames "
                                   f"({expected} bytes) but file has {size} bytes")

    def __len__(self):
        return self.header.frames

    def __iter__(self) -> Iterator[FrameTokens]:
        h = self.header
        n, d = h.tokens_per_frame, h.feature_dim
        with self.path.open("rb") as fh:
            fh.seek(HEADER.size)
            for t in range(h.frames):
                feats = np.frombuffer(fh.read(4 * n * d), dtype=_F32).reshape(n, d).astype(FLOAT)
                sal: Optional[np.ndarray]
                if h.has_saliency:
                    sal = np.frombuffer(fh.read(4 * n), dtype=_F32).astype(FLOAT)
                elif self.saliency_fn is not None:
                    sal = np.asarray(self.saliency_fn(feats), dtype=FLOAT)
                else:
                    sal = None
                yield FrameTokens(frame_index=t, features=feats, saliency=sal)


def read_stream(path, saliency_fn=None) -> list[FrameTokens]:
    return list(StreamReader(path, saliency_fn))
