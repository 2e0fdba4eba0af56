"""Closed-form memory and compute cost models.

The uncompressed kv-cache grows at ``2 * L * N * (H * d_h) * bytes * fps``
bytes per second. Keeping G of N tokens per frame at b bits instead of 16
divides that by ``(N / G) * (16 / b)``.
"""

from __future__ import annotations

from dataclasses import dataclass

GIB = 2 ** 30
GB = 10 ** 9


@dataclass(frozen=True)
class CostModel:
    """Model shape and stream settings; defaults describe a 7B video LLM at 0.5 fps."""

    layers: int = 28
    tokens_per_frame: int = 196
    kv_heads: int = 4
    head_dim: int = 128
    dtype_bytes: int = 2
    fps: float = 0.5
    frame_budget: int = 50
    quant_bits: int = 4
    horizon_frames: int = 1800

    def __post_init__(self):
        for name in ("layers", "tokens_per_frame", "kv_heads", "head_dim", "dtype_bytes",
                     "frame_budget", "quant_bits", "horizon_frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fps < 0:
            raise ValueError(f"fps must be nonnegative, got {self.fps}")
        if self.frame_budget > self.tokens_per_frame:
            raise ValueError("frame_budget cannot exceed tokens_per_frame")

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def fp_bits(self) -> int:
        return 8 * self.dtype_bytes


def growth_rate_bytes_per_sec(m: CostModel) -> float:
    return 2 * m.layers * m.tokens_per_frame * m.kv_width * m.dtype_bytes * m.fps


def compressed_growth_rate(m: CostModel) -> float:
    """Growth rate when only G tokens per frame are stored at ``quant_bits``."""
    return 2 * m.layers * m.frame_budget * m.kv_width * (m.quant_bits / 8) * m.fps


def horizon_footprint(m: CostModel, seconds: float, compressed: bool = False) -> float:
    """Bytes accumulated over ``seconds`` of stream."""
    if seconds < 0:
        raise ValueError("seconds must be nonnegative")
    rate = compressed_growth_rate(m) if compressed else growth_rate_bytes_per_sec(m)
    return rate * seconds


def render_gb(nbytes: float, binary: bool = True, digits: int = 1) -> str:
    """Render bytes as GB, binary (2**30) by default."""
    return f"{nbytes / (GIB if binary else GB):.{digits}f}"


def compression_ratio(N: int, G: int, fp_bits: int = 16, b: int = 4) -> float:
    """(N / G) * (fp_bits / b)."""
    if min(N, G, fp_bits, b) <= 0:
        raise ValueError("all arguments must be positive")
    if G > N:
        raise ValueError("G cannot exceed N")
    return (N * fp_bits) / (G * b)


def retention_percent(G: int, b: int, N: int = 196, fp_bits: int = 16) -> float:
    """Stored size as a percentage of the N-token, fp_bits baseline, to 0.1."""
    if min(N, G, fp_bits, b) <= 0:
        raise ValueError("all arguments must be positive")
    return round(100.0 * (G * b) / (N * fp_bits), 1)


def prefill_cost_ratio(N: int, G: int) -> float:
    """Token-count proxy for prefill FLOP reduction."""
    if G <= 0 or G > N:
        raise ValueError("need 0 < G <= N")
    return N / G


def group_code_bytes(H: int, G: int, d_h: int, b: int) -> int:
    """Packed key + value code bytes for one stored group (single layer)."""
    return 2 * ((H * G * d_h * b + 7) // 8)


def group_overhead_bytes(H: int, d_h: int) -> int:
    """Scale/offset for keys and values plus the representative key, float32."""
    return 4 * (2 * 2 * H * d_h + H * d_h)


def baseline_frame_bytes(H: int, N: int, d_h: int, dtype_bytes: int = 2) -> int:
    """Uncompressed single-layer kv bytes for one full frame."""
    return 2 * H * N * d_h * dtype_bytes
